//! Analytic gradients of every tape op against central finite differences.

mod common;

use common::{away_from_zero, gradient_error, random, random_shape, smooth_coords, Build};
use modir::model::{loss_dice, loss_ncc, loss_smooth, warp};
use modir::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn check(name: &str, inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let worst = gradient_error(inputs, build, rng);
    assert!(worst <= TOL, "{name}: relative error {worst:e}");
    worst
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let s = random_shape(&mut rng);
        let a = random(&s, -2.0, 2.0, &mut rng);
        let b = random(&s, -2.0, 2.0, &mut rng);
        let pos = random(&s, 0.5, 2.0, &mut rng);
        check("add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]), &mut rng);
        check("sub", &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]), &mut rng);
        check("mul", &[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]), &mut rng);
        check("div", &[a.clone(), pos], &|t, v| t.div(v[0], v[1]), &mut rng);
        check("square", std::slice::from_ref(&a), &|t, v| Ok(t.square(v[0])), &mut rng);
        check("scale", std::slice::from_ref(&a), &|t, v| Ok(t.scale(v[0], -1.7)), &mut rng);
        check("offset", std::slice::from_ref(&a), &|t, v| Ok(t.offset(v[0], 0.3)), &mut rng);
        check("sum", std::slice::from_ref(&a), &|t, v| Ok(t.sum(v[0])), &mut rng);
        check("mean", std::slice::from_ref(&a), &|t, v| Ok(t.mean(v[0])), &mut rng);
        let x = away_from_zero(&s, &mut rng);
        check("leaky_relu", std::slice::from_ref(&x), &|t, v| Ok(t.leaky_relu(v[0], 0.2)), &mut rng);
        check("relu", &[x], &|t, v| Ok(t.leaky_relu(v[0], 0.0)), &mut rng);
    }
}

#[test]
fn mean_of_square_gradient_is_two_x_over_n() {
    let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let mut t = Tape::new();
    let v = t.param(x.clone());
    let sq = t.square(v);
    let m = t.mean(sq);
    t.backward(m).unwrap();
    for (g, xv) in t.grad(v).unwrap().iter().zip(x.data()) {
        assert!((g - 2.0 * xv / 4.0).abs() < 1e-15);
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, padding, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 5)] {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let f = rng.random_range(1..4);
        let (h, w) = (rng.random_range(k..k + 5), rng.random_range(k..k + 5));
        let x = random(&[n, c, h, w], -1.0, 1.0, &mut rng);
        let kern = random(&[f, c, k, k], -1.0, 1.0, &mut rng);
        check(
            "conv2d",
            &[x, kern],
            &move |t, v| t.conv2d(v[0], v[1], stride, padding),
            &mut rng,
        );
    }
}

#[test]
fn conv2d_kernel_gradient_of_sum_on_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 1, 5, 5], -1.0, 1.0, &mut rng);
    let k = random(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
    let worst = check(
        "conv2d sum",
        &[x, k],
        &|t, v| {
            let y = t.conv2d(v[0], v[1], 1, 0)?;
            Ok(t.sum(y))
        },
        &mut rng,
    );
    assert!(worst <= 1e-6);
}

#[test]
fn bias_and_channel_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..4 {
        let s = random_shape(&mut rng);
        let x = random(&s, -1.0, 1.0, &mut rng);
        let b = random(&[s[1]], -1.0, 1.0, &mut rng);
        check("bias_add", &[x.clone(), b], &|t, v| t.bias_add(v[0], v[1]), &mut rng);
        check("channel_sum", std::slice::from_ref(&x), &|t, v| t.channel_sum(v[0]), &mut rng);
        let other = random(&[s[0], 2, s[2], s[3]], -1.0, 1.0, &mut rng);
        check("concat", &[x, other], &|t, v| t.concat(v[0], v[1]), &mut rng);
    }
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..4 {
        let s = random_shape(&mut rng);
        let x = random(&s, -1.0, 1.0, &mut rng);
        for factor in [1, 2, 3] {
            check(
                "upsample_bilinear",
                std::slice::from_ref(&x),
                &move |t, v| t.upsample_bilinear(v[0], factor),
                &mut rng,
            );
        }
        check("diff x", std::slice::from_ref(&x), &|t, v| t.diff(v[0], 3), &mut rng);
        check("diff y", std::slice::from_ref(&x), &|t, v| t.diff(v[0], 2), &mut rng);
        check("box_sum", std::slice::from_ref(&x), &|t, v| t.box_sum(v[0], 3), &mut rng);
        let flow = random(&[s[0], 2, s[2], s[3]], -2.0, 2.0, &mut rng);
        check("flow_to_coords", &[flow], &|t, v| t.flow_to_coords(v[0]), &mut rng);
    }
}

#[test]
fn grid_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let [n, c, h, w] = random_shape(&mut rng);
        let x = random(&[n, c, h, w], -1.0, 1.0, &mut rng);
        let coords = smooth_coords(n, h, w, &mut rng);
        check("grid_sample", &[x, coords], &|t, v| t.grid_sample(v[0], v[1]), &mut rng);
    }
}

#[test]
fn grid_sample_sum_coordinate_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
    let coords = smooth_coords(1, 6, 6, &mut rng);
    check(
        "grid_sample sum",
        &[x, coords],
        &|t, v| {
            let y = t.grid_sample(v[0], v[1])?;
            Ok(t.sum(y))
        },
        &mut rng,
    );
}

#[test]
fn losses_through_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (name, worst) in common::loss_errors(&mut rng) {
        assert!(worst <= TOL, "{name}: relative error {worst:e}");
    }
}

#[test]
fn every_op_on_random_shapes() {
    for seed in 0..3 {
        for (name, worst) in common::every_op(seed) {
            assert!(worst <= TOL, "{name} (seed {seed}): relative error {worst:e}");
        }
    }
}

#[test]
fn micro_model_with_ten_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let src = random(&[1, 1, 12, 12], 0.0, 1.0, &mut rng);
    let tgt = random(&[1, 1, 12, 12], 0.0, 1.0, &mut rng);
    let mask_s = random(&[1, 1, 12, 12], 0.0, 1.0, &mut rng);
    let mask_t = random(&[1, 1, 12, 12], 0.0, 1.0, &mut rng);
    let k1 = random(&[2, 2, 1, 1], -1.5, 1.5, &mut rng);
    let b1 = random(&[2], 0.1, 0.5, &mut rng);
    let k2 = random(&[2, 2, 1, 1], -1.5, 1.5, &mut rng);
    let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let s = t.constant(src.clone());
        let g = t.constant(tgt.clone());
        let ms = t.constant(mask_s.clone());
        let mt = t.constant(mask_t.clone());
        let x = t.concat(s, g)?;
        let h = t.conv2d(x, v[0], 1, 0)?;
        let h = t.bias_add(h, v[1])?;
        let h = t.leaky_relu(h, 0.2);
        let flow = t.conv2d(h, v[2], 1, 0)?;
        let warped = warp(t, s, flow)?;
        let l1 = loss_ncc(t, warped, g)?;
        let l2 = loss_smooth(t, flow)?;
        let wm = warp(t, ms, flow)?;
        let l3 = loss_dice(t, wm, mt)?;
        let l2 = t.scale(l2, 0.3);
        let l3 = t.scale(l3, 0.5);
        let a = t.add(l1, l2)?;
        t.add(a, l3)
    };
    assert_eq!(k1.len() + b1.len() + k2.len(), 10);
    check("micro model", &[k1, b1, k2], &build, &mut rng);
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
    let grads = |wa: f64, wb: f64| {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let sq = t.square(v);
        let la = t.mean(sq);
        let d = t.diff(v, 3)?;
        let lb = t.sum(d);
        let a = t.scale(la, wa);
        let b = t.scale(lb, wb);
        let total = t.add(a, b)?;
        t.backward(total)?;
        Ok::<_, modir::Error>(t.grad(v).unwrap().to_vec())
    };
    let (ga, gb, gab) = (grads(1.0, 0.0).unwrap(), grads(0.0, 1.0).unwrap(), grads(0.7, 2.5).unwrap());
    for i in 0..ga.len() {
        assert!((gab[i] - (0.7 * ga[i] + 2.5 * gb[i])).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 3, 9, 9], -1.0, 1.0, &mut rng);
        let k = random(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let (vx, vk) = (t.param(x), t.param(k));
        let y = t.conv2d(vx, vk, 2, 1).unwrap();
        let y = t.upsample_bilinear(y, 2).unwrap();
        let s = t.square(y);
        let l = t.mean(s);
        t.backward(l).unwrap();
        (t.item(l), t.grad(vx).unwrap().to_vec(), t.grad(vk).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
