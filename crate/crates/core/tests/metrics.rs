//! Metric properties and report semantics.

use modir::metrics::{dice_score, evaluate_solution, folding_percent, set_report, tre};
use modir::model::{ModelConfig, ModelParams};
use modir::pair::{Dvf, Landmark};
use modir::synth::{Dataset, SynthConfig};
use modir::Tensor;
use proptest::prelude::*;

fn landmarks() -> impl Strategy<Value = Vec<Landmark>> {
    prop::collection::vec(
        (0.0..15.0f64, 0.0..15.0f64, 0.0..15.0f64, 0.0..15.0f64)
            .prop_map(|(a, b, c, d)| Landmark { target: [a, b], source: [c, d] }),
        1..20,
    )
}

proptest! {
    #[test]
    fn tre_ignores_landmark_order(mut lms in landmarks(), seed in 0u64..100) {
        let u = Dvf::from_fn(16, 16, |x, y| (((x * 7 + y * 3 + seed as usize) % 5) as f64 * 0.3, ((x + y) % 3) as f64 * -0.4));
        let a = tre(&u, &lms).mean;
        lms.reverse();
        prop_assert!((tre(&u, &lms).mean - a).abs() < 1e-12);
    }

    #[test]
    fn translations_never_fold(cx in -20.0..20.0f64, cy in -20.0..20.0f64) {
        prop_assert_eq!(folding_percent(&Dvf::from_fn(9, 11, |_, _| (cx, cy))), 0.0);
    }

    #[test]
    fn dice_is_symmetric(a in prop::collection::vec(0.0..1.0f64, 2 * 36), b in prop::collection::vec(0.0..1.0f64, 2 * 36)) {
        let ta = Tensor::new(&[1, 2, 6, 6], a).unwrap();
        let tb = Tensor::new(&[1, 2, 6, 6], b).unwrap();
        let ab = dice_score(&ta, &tb).unwrap();
        let ba = dice_score(&tb, &ta).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert!((0.0..=100.0).contains(&ab.mean));
    }

    #[test]
    fn folding_is_a_percentage(seed in 0u64..500) {
        let u = Dvf::from_fn(10, 10, |x, y| {
            let h = (x as u64 * 31 + y as u64 * 17 + seed * 13) % 97;
            (h as f64 / 20.0 - 2.4, (h * 7 % 89) as f64 / 20.0 - 2.2)
        });
        let f = folding_percent(&u);
        prop_assert!((0.0..=100.0).contains(&f));
    }
}

fn zero_model(heads: usize) -> ModelParams {
    let mut params = ModelParams::init(0, &ModelConfig { heads, ..ModelConfig::default() }).unwrap();
    for h in &mut params.heads {
        h.flow.kernel = Tensor::zeros(h.flow.kernel.shape());
    }
    params
}

#[test]
fn identity_model_reports_pre_registration_values() {
    let data = Dataset::new(SynthConfig::default(), 3, 1).unwrap();
    let pairs: Vec<_> = data.iter().map(Result::unwrap).collect();
    let report = set_report(&zero_model(4), &pairs, &[1.0; 3], true).unwrap();
    assert!((report.summary.min_tre.value - report.pre_tre).abs() < 1e-12);
    for pr in &report.pairs {
        assert_eq!(pr.summary.min_tre.value, pr.pre_tre);
        assert!(pr.set.solutions.iter().all(|s| s.folding_pct == 0.0));
    }
}

#[test]
fn ground_truth_field_beats_every_head_in_tre() {
    let data = Dataset::new(SynthConfig::default(), 2, 1).unwrap();
    let pair = data.pair(1).unwrap();
    let params = ModelParams::init(3, &ModelConfig { heads: 5, flow_init_std: 0.02, ..ModelConfig::default() }).unwrap();
    let report = set_report(&params, std::slice::from_ref(&pair), &[1.0; 3], true).unwrap();
    let oracle = evaluate_solution(&pair, pair.gt_dvf.as_ref().unwrap(), true).unwrap();
    for s in &report.pairs[0].set.solutions {
        assert!(oracle.mean_tre < s.mean_tre);
    }
}

#[test]
fn guidance_off_reports_two_losses() {
    let data = Dataset::new(SynthConfig::default(), 2, 1).unwrap();
    let pair = data.pair(0).unwrap();
    let report = set_report(&zero_model(2), &[pair], &[1.0, 1.0], false).unwrap();
    assert!(report.mean_set.solutions.iter().all(|s| s.losses.len() == 2));
    assert!(report.summary.hypervolume > 0.0);
}
