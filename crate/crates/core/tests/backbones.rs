use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safr::graph::{Graph, Mode};
use safr::instrumentation::{count_flops, count_params};
use safr::layers::LayerKind;
use safr::params::Section;
use safr::{build_model, describe_model, forward_classifier, forward_features, Error, ModelConfig, ModelVariant};

fn images(n: usize, size: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(&[n, 3, size, size]), || rng.random_range(-2.0..2.0))
}

fn narrow(v: ModelVariant) -> ModelConfig {
    ModelConfig::new(v, 6).with_width(0.125).with_input_size(32)
}

#[test]
fn every_variant_pools_once_and_has_no_fc_in_the_feature_path() {
    for v in ModelVariant::ALL {
        let m = build_model(&ModelConfig::new(v, 10), 0).unwrap();
        let inv = describe_model(&m);
        assert_eq!(inv.iter().filter(|l| l.kind == LayerKind::GlobalAvgPool).count(), 1, "{v}");
        assert!(
            !inv.iter().any(|l| l.section == Section::Feature && l.kind == LayerKind::Linear),
            "{v} has a linear layer before the embedding"
        );
        let head: Vec<_> = inv.iter().filter(|l| l.section == Section::Head).map(|l| l.kind).collect();
        assert_eq!(head, [LayerKind::LayerNorm, LayerKind::Linear]);
    }
}

#[test]
fn micro_has_no_dropout() {
    let m = build_model(&ModelConfig::new(ModelVariant::Micro, 10), 0).unwrap();
    assert!(!describe_model(&m).iter().any(|l| l.kind == LayerKind::Dropout));
}

#[test]
fn large_differs_from_baseline_only_by_attention() {
    let strip = |v| {
        describe_model(&build_model(&ModelConfig::new(v, 10), 0).unwrap())
            .into_iter()
            .filter(|l| !matches!(l.kind, LayerKind::GlobalAttention | LayerKind::LocalAttention))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(ModelVariant::Large), strip(ModelVariant::Baseline));
    let large = build_model(&ModelConfig::new(ModelVariant::Large, 10), 0).unwrap();
    let inv = describe_model(&large);
    assert_eq!(inv.iter().filter(|l| l.kind == LayerKind::GlobalAttention).count(), 1);
    assert_eq!(inv.iter().filter(|l| l.kind == LayerKind::LocalAttention).count(), 4);
}

#[test]
fn baseline_matches_the_reference_resnet50_budget() {
    // Published ResNet-50 figures: 25,557,032 params with a 2048×1000 fc
    // (2,049,000) and 4.09 GMACs at 224×224, fc included.
    let m = build_model(&ModelConfig::new(ModelVariant::Baseline, 1000), 0).unwrap();
    assert_eq!(count_params(&m).feature, 25_557_032 - 2_049_000);
    let macs = count_flops(&m, 224).unwrap().macs as f64;
    let reference = 4.09e9 - 2_048_000.0;
    assert!((macs - reference).abs() / reference < 5e-3, "{macs}");
}

#[test]
fn build_is_deterministic() {
    for v in ModelVariant::ALL {
        let a = build_model(&narrow(v), 3).unwrap();
        let b = build_model(&narrow(v), 3).unwrap();
        assert_eq!(describe_model(&a), describe_model(&b));
        for ((_, ea), (_, eb)) in a.store().iter().zip(b.store().iter()) {
            assert_eq!(ea.value, eb.value, "{v}: {}", ea.name);
        }
        let c = build_model(&narrow(v), 4).unwrap();
        assert!(a.store().iter().zip(c.store().iter()).any(|((_, x), (_, y))| x.value != y.value));
    }
}

#[test]
fn embedding_width_does_not_depend_on_input_size() {
    for v in ModelVariant::ALL {
        let m = build_model(&narrow(v), 1).unwrap();
        for size in [32, 45, 64] {
            let f = forward_features(&m, &images(2, size, 0)).unwrap();
            assert_eq!(f.dim(), (2, m.embedding_dim()), "{v} at {size}");
            assert!(f.iter().all(|x| x.is_finite()));
        }
        let logits = forward_classifier(&m, &forward_features(&m, &images(3, 32, 1)).unwrap()).unwrap();
        assert_eq!(logits.dim(), (3, 6));
    }
}

#[test]
fn inference_is_pure() {
    let m = build_model(&narrow(ModelVariant::Small), 5).unwrap();
    let x = images(2, 40, 9);
    assert_eq!(forward_features(&m, &x).unwrap(), forward_features(&m, &x).unwrap());
    // Rows are independent of their batch mates in inference mode.
    let one = forward_features(&m, &x.slice(ndarray::s![0..1, .., .., ..]).to_owned().into_dyn()).unwrap();
    let both = forward_features(&m, &x).unwrap();
    for (a, b) in one.row(0).iter().zip(both.row(0)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let m = build_model(&narrow(ModelVariant::Micro), 0).unwrap();
    assert!(matches!(forward_features(&m, &images(1, 16, 0)), Err(Error::InputTooSmall { .. })));
    let gray = ArrayD::zeros(IxDyn(&[1, 1, 32, 32]));
    assert!(matches!(forward_features(&m, &gray), Err(Error::Shape(_))));
    assert!(forward_classifier(&m, &ndarray::Array2::zeros((1, 3))).is_err());
}

#[test]
fn config_errors_name_fields() {
    let cases: Vec<(ModelConfig, &str)> = vec![
        (ModelConfig { num_classes: 1, ..ModelConfig::default() }, "model.num_classes"),
        (ModelConfig::default().with_width(0.0), "model.width_multiplier"),
        (ModelConfig::default().with_input_size(8), "model.input_size"),
        (ModelConfig { dbam_depth: 0, ..ModelConfig::default() }, "model.dbam_depth"),
        (ModelConfig { leaky_slope: 1.5, ..ModelConfig::default() }, "model.leaky_slope"),
    ];
    for (cfg, field) in cases {
        match build_model(&cfg, 0) {
            Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: unexpected {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn parameter_ordering_follows_capacity() {
    let feature = |v| count_params(&build_model(&ModelConfig::new(v, 576), 0).unwrap()).feature;
    let (l, me, s, mi) = (
        feature(ModelVariant::Large),
        feature(ModelVariant::Medium),
        feature(ModelVariant::Small),
        feature(ModelVariant::Micro),
    );
    assert!(l > me && me > s && s > mi, "{l} {me} {s} {mi}");
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    for v in [ModelVariant::Small, ModelVariant::Micro] {
        let mut model = build_model(&narrow(v), 2).unwrap();
        let x = images(1, 32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r: Vec<f64> = (0..model.embedding_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |m: &safr::Model| -> f64 {
            let f = forward_features(m, &x).unwrap();
            f.row(0).iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let g = Graph::new(Mode::EvalWithGrad);
        let feats = model.features(&g, &g.input(x.clone())).unwrap();
        let seed = ArrayD::from_shape_vec(IxDyn(&[1, r.len()]), r.clone()).unwrap();
        let grads = g.backward_with(&feats, seed);
        let ids: Vec<_> = model.store().iter().filter(|(_, e)| e.kind.learnable()).map(|(id, _)| id).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &id in ids.iter().step_by(ids.len() / 12 + 1) {
            let n = model.store().entry(id).numel();
            let k = rng.random_range(0..n);
            analytic.push(grads.param(id).map_or(0.0, |t| t.as_slice().unwrap()[k]));
            let h = 1e-5;
            let orig = model.store().value(id).as_slice().unwrap()[k];
            model.store_mut().value_mut(id).as_slice_mut().unwrap()[k] = orig + h;
            let up = objective(&model);
            model.store_mut().value_mut(id).as_slice_mut().unwrap()[k] = orig - h;
            let down = objective(&model);
            model.store_mut().value_mut(id).as_slice_mut().unwrap()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-9);
        assert!(diff / scale < 1e-4, "{v}: {analytic:?} vs {numeric:?}");
    }
}
