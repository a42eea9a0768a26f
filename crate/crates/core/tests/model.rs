//! Registration network, warping and loss behaviour.

mod common;

use modir::model::{
    forward_multi_head, loss_dice, loss_ncc, loss_smooth, predict, warp_tensor, ModelConfig, ModelParams,
    PairVars,
};
use modir::pair::{Dvf, RegistrationPair};
use modir::synth::{Dataset, SynthConfig};
use modir::train::{Adam, ForwardPass};
use modir::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn default_pair(index: usize) -> RegistrationPair {
    Dataset::new(SynthConfig::default(), 8, 6).unwrap().pair(index).unwrap()
}

fn ncc(a: &Tensor, b: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let l = loss_ncc(&mut t, va, vb).unwrap();
    t.item(l)
}

fn smooth(u: &Dvf) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(u.tensor().clone());
    let l = loss_smooth(&mut t, v).unwrap();
    t.item(l)
}

#[test]
fn ncc_of_identical_images_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Tensor::from_fn(&[1, 1, 64, 64], |_| rng.random::<f64>());
    assert!(ncc(&img, &img) <= 1e-6, "{}", ncc(&img, &img));
}

/// Near-flat background windows keep the stabilized loss slightly above zero.
#[test]
fn ncc_of_identical_synthetic_images_is_small() {
    let img = default_pair(0).target_image;
    let l = ncc(&img, &img);
    assert!(l > 0.0 && l <= 2e-3, "{l}");
}

#[test]
fn ncc_of_independent_noise_is_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::from_fn(&[1, 1, 64, 64], |_| rng.random::<f64>());
    let b = Tensor::from_fn(&[1, 1, 64, 64], |_| rng.random::<f64>());
    let l = ncc(&a, &b);
    assert!((l - 1.0).abs() <= 0.1, "noise NCC loss {l}");
}

fn correlated_pair(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(&[1, 1, 24, 24], |_| rng.random::<f64>());
    let b = Tensor::from_fn(&[1, 1, 24, 24], |i| 0.5 * a.data()[i] + 0.5 * rng.random::<f64>());
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ncc_is_invariant_to_positive_affine_intensity(scale in 1.0..5.0f64, shift in -2.0..2.0f64, seed in 0u64..1000) {
        let (a, b) = correlated_pair(seed);
        let base = ncc(&a, &b);
        let affine = |t: &Tensor| Tensor::from_fn(t.shape(), |i| scale * t.data()[i] + shift);
        prop_assert!(ncc(&a, &affine(&a)) <= 1e-6);
        prop_assert!((ncc(&affine(&a), &b) - base).abs() <= 1e-6);
        prop_assert!((ncc(&a, &affine(&b)) - base).abs() <= 1e-6);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&base));
    }

    /// Lower contrast shrinks window variances toward the stabilizer, so
    /// invariance only holds up to a few times `eps / (var * var)`.
    #[test]
    fn ncc_is_nearly_invariant_under_contrast_loss(scale in 0.2..1.0f64, seed in 0u64..1000) {
        let (a, b) = correlated_pair(seed);
        let base = ncc(&a, &b);
        let dim = Tensor::from_fn(a.shape(), |i| scale * a.data()[i]);
        prop_assert!((ncc(&dim, &b) - base).abs() <= 1e-6 / (scale * scale));
    }

    #[test]
    fn smoothness_ignores_constant_offsets(cx in -5.0..5.0f64, cy in -5.0..5.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Dvf::from_fn(12, 12, |_, _| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let shifted = Dvf::from_fn(12, 12, |x, y| { let (a, b) = u.at(x, y); (a + cx, b + cy) });
        prop_assert!((smooth(&u) - smooth(&shifted)).abs() < 1e-12);
        prop_assert_eq!(smooth(&Dvf::from_fn(12, 12, |_, _| (cx, cy))), 0.0);
        prop_assert!(smooth(&u) > 0.0);
    }

    #[test]
    fn losses_stay_in_unit_interval(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[1, 2, 16, 16], |_| rng.random::<f64>());
        let b = Tensor::from_fn(&[1, 2, 16, 16], |_| rng.random::<f64>());
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let d = loss_dice(&mut t, va, vb).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.item(d)));
    }
}

#[test]
fn warp_examples() {
    let img = default_pair(1).source_image;
    assert_eq!(warp_tensor(&img, &Dvf::zeros(64, 64)).unwrap(), img);
    let shifted = warp_tensor(&img, &Dvf::from_fn(64, 64, |_, _| (1.0, 0.0))).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            assert_eq!(shifted.data()[y * 64 + x], img.data()[y * 64 + (x + 1).min(63)]);
        }
    }
}

#[test]
fn warping_back_nearly_inverts_a_small_smooth_field() {
    let img = default_pair(2).target_image;
    let u = Dvf::from_fn(64, 64, |x, y| {
        let (fx, fy) = (x as f64 / 64.0, y as f64 / 64.0);
        (
            1.2 * (std::f64::consts::TAU * fy).sin(),
            0.8 * (std::f64::consts::TAU * fx).cos(),
        )
    });
    let there = warp_tensor(&img, &u).unwrap();
    let back = warp_tensor(&there, &u.negated()).unwrap();
    let mut err = 0.0;
    let mut count = 0;
    for y in 8..56 {
        for x in 8..56 {
            err += (back.data()[y * 64 + x] - img.data()[y * 64 + x]).abs();
            count += 1;
        }
    }
    let mae = err / count as f64;
    assert!(mae <= 0.05, "round-trip mean abs error {mae}");
}

#[test]
fn initial_fields_are_near_zero() {
    let params = ModelParams::init(7, &ModelConfig { heads: 3, ..ModelConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pair = default_pair(0);
    pair.source_image = Tensor::from_fn(&[1, 1, 64, 64], |_| rng.random::<f64>());
    pair.target_image = Tensor::from_fn(&[1, 1, 64, 64], |_| rng.random::<f64>());
    for dvf in predict(&params, &pair).unwrap() {
        assert!(dvf.max_magnitude() <= 0.5);
    }
}

#[test]
fn sharing_the_encoder_saves_parameters() {
    let count = |share| {
        ModelParams::init(0, &ModelConfig { heads: 5, share_encoder: share, ..ModelConfig::default() })
            .unwrap()
            .parameter_count()
    };
    let (shared, separate) = (count(true), count(false));
    let saving = 1.0 - shared as f64 / separate as f64;
    println!("p = 5: {shared} shared vs {separate} separate parameters ({:.1}% fewer)", 100.0 * saving);
    assert!(saving > 0.0);
}

#[test]
fn one_head_is_a_plain_encoder_decoder() {
    let pair = default_pair(0);
    let single = ModelParams::init(4, &ModelConfig { heads: 1, ..ModelConfig::default() }).unwrap();
    let dvfs = predict(&single, &pair).unwrap();
    assert_eq!(dvfs.len(), 1);
    assert_eq!(dvfs[0].tensor().shape(), &[1, 2, 64, 64]);
}

#[test]
fn identical_replicas_give_identical_fields() {
    let pair = default_pair(0);
    let mut params = ModelParams::init(4, &ModelConfig { heads: 3, share_encoder: false, flow_init_std: 0.05, ..ModelConfig::default() }).unwrap();
    for i in 1..3 {
        params.encoders[i] = params.encoders[0].clone();
        params.heads[i] = params.heads[0].clone();
    }
    let dvfs = predict(&params, &pair).unwrap();
    assert_eq!(dvfs[0], dvfs[1]);
    assert_eq!(dvfs[0], dvfs[2]);
}

#[test]
fn distinct_heads_give_distinct_fields() {
    let pair = default_pair(0);
    let params = ModelParams::init(4, &ModelConfig { heads: 3, ..ModelConfig::default() }).unwrap();
    let dvfs = predict(&params, &pair).unwrap();
    let mut max_dist: f64 = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            let d = dvfs[i].tensor().data().iter().zip(dvfs[j].tensor().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            max_dist = max_dist.max(d);
        }
    }
    assert!(max_dist > 0.0);
}

#[test]
fn wrong_input_size_is_shape_error() {
    let pair = Dataset::new(SynthConfig { size: 32, ..SynthConfig::default() }, 2, 1).unwrap().pair(0).unwrap();
    let params = ModelParams::init(0, &ModelConfig { heads: 2, ..ModelConfig::default() }).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let inputs = PairVars::record(&mut tape, &pair).unwrap();
    assert!(matches!(
        forward_multi_head(&mut tape, &params, &bound, &inputs),
        Err(modir::Error::Shape(_))
    ));
}

#[test]
fn image_only_weights_match_image_loss_gradient() {
    let pair = default_pair(0);
    let params = ModelParams::init(2, &ModelConfig { heads: 2, flow_init_std: 0.02, ..ModelConfig::default() }).unwrap();
    let weighted = ForwardPass::new(&params, &pair, true).unwrap().backward(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();

    // The same gradient from the image losses alone.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let inputs = PairVars::record(&mut tape, &pair).unwrap();
    let dvfs = forward_multi_head(&mut tape, &params, &bound, &inputs).unwrap();
    let mut total = None;
    for d in dvfs {
        let w = modir::model::warp(&mut tape, inputs.source, d).unwrap();
        let l = loss_ncc(&mut tape, w, inputs.target).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l).unwrap(),
        });
    }
    tape.backward(total.unwrap()).unwrap();
    let direct = bound.grads(&tape);
    for (a, b) in weighted.iter().flatten().zip(direct.iter().flatten()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn segmentation_only_training_reduces_dice_loss() {
    let config = ModelConfig {
        size: 32,
        encoder_channels: vec![8, 8, 8],
        decoder_channels: vec![8, 8, 8],
        heads: 1,
        ..ModelConfig::default()
    };
    let pair = Dataset::new(SynthConfig { size: 32, magnitude: 3.0, ..SynthConfig::default() }, 1, 1)
        .unwrap()
        .pair(0)
        .unwrap();
    let mut params = ModelParams::init(0, &config).unwrap();
    let mut adam = Adam::for_tensors(&params.tensors());
    let seg = |params: &ModelParams| ForwardPass::new(params, &pair, true).unwrap().loss_values()[0][2];
    let before = seg(&params);
    for _ in 0..100 {
        let grads = ForwardPass::new(&params, &pair, true).unwrap().backward(&[vec![0.0, 0.0, 1.0]]).unwrap();
        adam.step_model(&mut params, &grads, 1e-3).unwrap();
    }
    let after = seg(&params);
    assert!(after < before, "segmentation loss {before} -> {after}");
}

/// Finite differences of the weighted multi-head loss with respect to a
/// sample of parameters spread over every tensor of the network.
#[test]
fn full_model_gradient_matches_finite_differences() {
    let pair = default_pair(3);
    let config = ModelConfig { heads: 2, flow_init_std: 0.05, ..ModelConfig::default() };
    let params = ModelParams::init(11, &config).unwrap();
    let weights = vec![vec![0.5, 0.2, 0.3], vec![0.2, 0.3, 0.5]];
    let worst = common::model_gradient_error(&params, &pair, &weights, 5);
    assert!(worst <= 1e-4, "relative error {worst:e}");
}
