use ndarray::{concatenate, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safr::instrumentation::*;
use safr::params::Section;
use safr::{build_model, describe_model, ModelConfig, ModelVariant};

fn images(n: usize, size: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(&[n, 3, size, size]), || rng.random_range(-2.0..2.0))
}

fn narrow(v: ModelVariant) -> ModelConfig {
    ModelConfig::new(v, 6).with_width(0.125).with_input_size(32)
}

#[test]
fn parameter_counts_agree_with_the_inventory() {
    for v in ModelVariant::ALL {
        let m = build_model(&ModelConfig::new(v, 100), 0).unwrap();
        let p = count_params(&m);
        let inv = describe_model(&m);
        let sum = |s| inv.iter().filter(|l| l.section == s).map(|l| l.param_count).sum::<usize>();
        assert_eq!(p.feature, sum(Section::Feature), "{v}");
        assert_eq!(p.head, sum(Section::Head), "{v}");
        assert_eq!(p.total, p.feature + p.head);
        // Layer norm (2·D) plus the classifier (D·classes + classes).
        let d = m.embedding_dim();
        assert_eq!(p.head, 2 * d + d * 100 + 100, "{v}");
    }
}

#[test]
fn flop_totals_are_sums_of_the_breakdown() {
    for v in ModelVariant::ALL {
        let m = build_model(&narrow(v), 0).unwrap();
        for size in [32, 64] {
            let f = count_flops(&m, size).unwrap();
            assert_eq!(f.flops, f.breakdown.iter().map(|c| c.flops).sum::<u64>());
            assert_eq!(f.macs, f.breakdown.iter().map(|c| c.macs).sum::<u64>());
            assert_eq!(f.conv_flops(), 2 * f.macs);
            assert!(f.flops > f.conv_flops(), "{v}: elementwise work is counted");
        }
        assert!(count_flops(&m, 8).is_err());
    }
}

#[test]
fn conv_cost_matches_hand_count() {
    // Micro's stem is one conv: 3→16, 3×3, stride 2 at 224 gives 112×112 outputs, no bias.
    let m = build_model(&ModelConfig::new(ModelVariant::Micro, 10), 0).unwrap();
    let f = count_flops(&m, 224).unwrap();
    let first = f.breakdown.iter().find(|c| c.scope == "stem").unwrap();
    assert_eq!(first.macs, 3 * 9 * 16 * 112 * 112);
}

#[test]
fn flops_grow_quadratically_with_input_size() {
    let m = build_model(&ModelConfig::new(ModelVariant::Baseline, 10), 0).unwrap();
    let a = count_flops(&m, 64).unwrap().macs as f64;
    let b = count_flops(&m, 128).unwrap().macs as f64;
    assert!((b / a - 4.0).abs() < 0.05, "{}", b / a);
}

#[test]
fn density_oracle() {
    let t = ndarray::arr1(&[0.0, 1e-7, -0.5, 2.0, 1e-5]).into_dyn();
    assert_eq!(density_of(&t, 1e-6), 3.0 / 5.0);
    assert_eq!(density_of(&t, 0.0), 4.0 / 5.0);
    assert_eq!(density_of(&ArrayD::zeros(IxDyn(&[0])), 1e-6), 0.0);
}

#[test]
fn densities_are_fractions_and_ignore_batch_duplication() {
    for v in [ModelVariant::Large, ModelVariant::Micro] {
        let m = build_model(&narrow(v), 1).unwrap();
        let x = images(2, 32, 3);
        let once = activation_density(&m, &x, 1e-6).unwrap();
        let twice = activation_density(&m, &concatenate(Axis(0), &[x.view(), x.view()]).unwrap(), 1e-6).unwrap();
        assert_eq!(once.first().unwrap().name, "input");
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(a.name, b.name);
            assert!((0.0..=1.0).contains(&a.density));
            assert!((a.density - b.density).abs() < 1e-12, "{v} {}", a.name);
        }
    }
}

#[test]
fn model_cards_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for v in ModelVariant::ALL {
        let m = build_model(&narrow(v), 0).unwrap();
        let x = images(1, 32, 0);
        let r = profile(&m, 32, Some((&x, 1e-6))).unwrap();
        let (md, json) = emit_model_card(&r, &dir.path().join(v.to_string())).unwrap();
        let text = std::fs::read_to_string(&md).unwrap();
        assert!(text.contains(&r.params.feature.to_string()));
        assert_eq!(read_model_card(&json).unwrap(), r);
        reports.push(r);
    }
    let cards = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(cards, 2 * ModelVariant::ALL.len());
    assert!(read_model_card(&dir.path().join("missing.json")).is_err());
}

#[test]
fn capacity_ordering_at_native_size() {
    let gflops = |v| {
        let m = build_model(&ModelConfig::new(v, 10), 0).unwrap();
        profile(&m, m.config().input_size, None).unwrap().gflops()
    };
    let (l, me, s, mi) = (
        gflops(ModelVariant::Large),
        gflops(ModelVariant::Medium),
        gflops(ModelVariant::Small),
        gflops(ModelVariant::Micro),
    );
    assert!(l > me && me > s && s > mi, "{l} {me} {s} {mi}");
}
