use ndarray::{Array4, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use safr::attention::*;
use safr::graph::{Graph, Mode, Var};
use safr::ops;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(rng))
}

/// Same-padded 3×3 convolution written as plain loops.
fn conv3x3_ref(x: &Array4<f64>, w: &Array4<f64>, b: &[f64], groups: usize) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let o = w.dim().0;
    let cin_g = c / groups;
    let cout_g = o / groups;
    let mut out = Array4::zeros((n, o, h, wd));
    for bi in 0..n {
        for oc in 0..o {
            let g = oc / cout_g;
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[oc];
                    for ic in 0..cin_g {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[[oc, ic, ky, kx]] * x[[bi, g * cin_g + ic, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[bi, oc, y, xx]] = acc;
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn leaky(v: f64, s: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        s * v
    }
}

fn as4(t: &ArrayD<f64>) -> Array4<f64> {
    t.clone().into_dimensionality().unwrap()
}

fn global_ref(x: &Array4<f64>, p: &GlobalAttentionParams) -> Array4<f64> {
    let h = conv3x3_ref(x, &as4(&p.conv1_weight), p.conv1_bias.as_slice().unwrap(), 1).mapv(|v| leaky(v, p.leaky_slope));
    let w = conv3x3_ref(&h, &as4(&p.conv2_weight), p.conv2_bias.as_slice().unwrap(), 1).mapv(sigmoid);
    x * &w
}

fn dbam_maps_ref(x: &Array4<f64>, p: &LocalAttentionParams) -> Array4<f64> {
    let c = x.dim().1;
    let mut h = x.clone();
    for (i, (w, b)) in p.depthwise.iter().enumerate() {
        h = conv3x3_ref(&h, &as4(w), b.as_slice().unwrap(), c);
        if i + 1 < p.depthwise.len() {
            h.mapv_inplace(|v| leaky(v, p.leaky_slope));
        }
    }
    h.mapv(sigmoid)
}

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn global_matches_reference_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = init_attention_params(4, &mut rng).global;
    let p = GlobalAttentionParams {
        conv1_bias: randn(&[4], &mut rng) * 0.1,
        conv2_bias: randn(&[4], &mut rng) * 0.1,
        ..p
    };
    let x = randn(&[1, 4, 8, 8], &mut rng);
    let got = global_attention_forward(&x, &p).unwrap();
    let want = global_ref(&as4(&x), &p).into_dyn();
    assert!(max_abs_diff(&got, &want) < 1e-6);
}

#[test]
fn dbam_matches_reference_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = init_attention_params(4, &mut rng).local;
    for (_, b) in p.depthwise.iter_mut() {
        *b = randn(&[4], &mut rng) * 0.1;
    }
    let x = randn(&[2, 4, 6, 7], &mut rng);
    let maps = dbam_maps(&x, &p).unwrap();
    let want_maps = dbam_maps_ref(&as4(&x), &p);
    assert!(max_abs_diff(&maps, &want_maps.clone().into_dyn()) < 1e-6);
    let got = dbam_forward(&x, &p).unwrap();
    assert!(max_abs_diff(&got, &(&as4(&x) * &want_maps).into_dyn()) < 1e-6);
    assert!(maps.iter().all(|&a| a > 0.0 && a < 1.0));
}

#[test]
fn zero_input_is_annihilated() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = init_attention_params(3, &mut rng);
    let x = ArrayD::zeros(IxDyn(&[2, 3, 5, 5]));
    assert!(global_attention_forward(&x, &p.global).unwrap().iter().all(|&v| v == 0.0));
    assert!(dbam_forward(&x, &p.local).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn saturated_gate_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = init_attention_params(3, &mut rng).global;
    p.conv2_weight.fill(0.0);
    p.conv2_bias.fill(40.0);
    let x = randn(&[1, 3, 6, 6], &mut rng);
    let out = global_attention_forward(&x, &p).unwrap();
    assert!(max_abs_diff(&out, &x) < 1e-6);
}

#[test]
fn each_channel_gets_its_own_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = init_attention_params(2, &mut rng).local;
    let plane = randn(&[1, 1, 5, 5], &mut rng);
    let x = ndarray::concatenate(ndarray::Axis(1), &[plane.view(), plane.view()]).unwrap();
    let maps = dbam_maps(&x, &p).unwrap();
    let a0 = maps.index_axis(ndarray::Axis(1), 0).to_owned();
    let a1 = maps.index_axis(ndarray::Axis(1), 1).to_owned();
    assert!(max_abs_diff(&a0, &a1) > 1e-3);
}

#[test]
fn mask_endpoints_and_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fl = randn(&[2, 3, 4, 4], &mut rng);
    let fg = randn(&[2, 3, 4, 4], &mut rng);
    assert_eq!(channel_mask_mix(&fl, &fg, &[1.0; 3]).unwrap(), fl);
    assert_eq!(channel_mask_mix(&fl, &fg, &[0.0; 3]).unwrap(), fg);
    let two = ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 2.0);
    let four = ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 4.0);
    assert!(channel_mask_mix(&two, &four, &[0.5, 0.5]).unwrap().iter().all(|&v| v == 3.0));
}

#[test]
fn mix_rejects_bad_arguments() {
    let a = ArrayD::zeros(IxDyn(&[1, 2, 3, 3]));
    let b = ArrayD::zeros(IxDyn(&[1, 3, 3, 3]));
    assert!(channel_mask_mix(&a, &b, &[0.5, 0.5]).is_err());
    assert!(channel_mask_mix(&a, &a, &[0.5]).is_err());
    assert!(channel_mask_mix(&a, &a, &[0.5, 1.5]).is_err());
}

#[test]
fn channel_mismatch_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = init_attention_params(3, &mut rng);
    let x = ArrayD::zeros(IxDyn(&[1, 4, 5, 5]));
    assert!(global_attention_forward(&x, &p.global).unwrap_err().is_config());
    assert!(dbam_forward(&x, &p.local).unwrap_err().is_config());
}

#[test]
fn init_is_deterministic_and_mask_starts_at_half() {
    let a = init_attention_params(5, &mut ChaCha8Rng::seed_from_u64(9));
    let b = init_attention_params(5, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    assert!(a.local.mask().iter().all(|&m| m == 0.5));
    let one = init_attention_params(1, &mut ChaCha8Rng::seed_from_u64(9));
    let x = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0);
    assert_eq!(global_attention_forward(&x, &one.global).unwrap().shape(), [1, 1, 3, 3]);
    assert_eq!(dbam_forward(&x, &one.local).unwrap().shape(), [1, 1, 3, 3]);
}

type Op = for<'g> fn(&[Var<'g>]) -> Var<'g>;

/// Relative error between analytic and central-difference gradients of `Σ r ⊙ op(inputs)`.
fn gradient_errors(inputs: &[ArrayD<f64>], op: Op, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Graph::new(Mode::EvalWithGrad);
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = op(&vars);
    let r = randn(out.shape(), &mut rng);
    let grads = g.backward_with(&out, r.clone());
    let objective = |ins: &[ArrayD<f64>]| -> f64 {
        let g = Graph::eval();
        let vs: Vec<_> = ins.iter().map(|t| g.input(t.clone())).collect();
        (op(&vs).value() * &r).sum()
    };
    let h = 1e-6;
    let norm = |a: &ArrayD<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    vars.iter()
        .enumerate()
        .map(|(k, var)| {
            let analytic = grads.wrt(var).cloned().unwrap_or_else(|| ArrayD::zeros(inputs[k].raw_dim()));
            let mut numeric = ArrayD::zeros(inputs[k].raw_dim());
            for i in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].as_slice_mut().unwrap()[i] -= h;
                numeric.as_slice_mut().unwrap()[i] = (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
            norm(&(&analytic - &numeric)) / norm(&analytic).max(norm(&numeric)).max(1e-12)
        })
        .collect()
}

fn gate<'g>(v: &[Var<'g>]) -> Var<'g> {
    global_attention(&v[0], &v[1], &v[2], &v[3], &v[4], DEFAULT_LEAKY_SLOPE)
}

fn local<'g>(v: &[Var<'g>]) -> Var<'g> {
    let layers = vec![(v[1].clone(), v[2].clone()), (v[3].clone(), v[4].clone())];
    dbam(&v[0], &layers, DEFAULT_LEAKY_SLOPE)
}

fn mix<'g>(v: &[Var<'g>]) -> Var<'g> {
    ops::channel_mix(&v[0], &v[1], &v[2])
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = randn(&[1, 2, 4, 4], &mut rng);
        let p = init_attention_params(2, &mut rng);
        let gp = p.global;
        let inputs = vec![
            x.clone(),
            gp.conv1_weight,
            randn(&[2], &mut rng) * 0.1,
            gp.conv2_weight,
            randn(&[2], &mut rng) * 0.1,
        ];
        for (k, e) in gradient_errors(&inputs, gate, seed).into_iter().enumerate() {
            assert!(e < 1e-4, "global attention input {k}: {e}");
        }

        let d = &p.local.depthwise;
        let inputs = vec![x.clone(), d[0].0.clone(), randn(&[2], &mut rng) * 0.1, d[1].0.clone(), randn(&[2], &mut rng) * 0.1];
        for (k, e) in gradient_errors(&inputs, local, seed).into_iter().enumerate() {
            assert!(e < 1e-4, "dbam input {k}: {e}");
        }

        let mask = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, 0.8]).unwrap();
        let inputs = vec![x.clone(), randn(&[1, 2, 4, 4], &mut rng), mask];
        for (k, e) in gradient_errors(&inputs, mix, seed).into_iter().enumerate() {
            assert!(e < 1e-4, "mix input {k}: {e}");
        }
    }
}

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = ArrayD<f64>> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-5.0f64..5.0, n).prop_map(move |v| ArrayD::from_shape_vec(IxDyn(&shape), v).unwrap())
}

fn shape4() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..4, 1usize..7, 1usize..7).prop_map(|(n, c, h, w)| [n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_never_amplifies((x, seed) in shape4().prop_flat_map(|s| (tensor(s), any::<u64>()))) {
        let p = init_attention_params(x.shape()[1], &mut ChaCha8Rng::seed_from_u64(seed));
        let out = global_attention_forward(&x, &p.global).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        for (o, i) in out.iter().zip(&x) {
            prop_assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn dbam_keeps_shape((x, seed) in shape4().prop_flat_map(|s| (tensor(s), any::<u64>()))) {
        let p = init_attention_params(x.shape()[1], &mut ChaCha8Rng::seed_from_u64(seed));
        let out = dbam_forward(&x, &p.local).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        prop_assert!(dbam_maps(&x, &p.local).unwrap().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn mix_is_idempotent_on_equal_inputs(
        (f, mask) in shape4().prop_flat_map(|s| (tensor(s), prop::collection::vec(0.0f64..=1.0, s[1])))
    ) {
        let out = channel_mask_mix(&f, &f, &mask).unwrap();
        for (o, i) in out.iter().zip(&f) {
            prop_assert!((o - i).abs() <= 1e-12 * i.abs().max(1.0));
        }
    }

    #[test]
    fn mix_is_convex_for_constant_channels(
        (lv, gv, mask, hw) in (1usize..4).prop_flat_map(|c| (
            prop::collection::vec(-10.0f64..10.0, c),
            prop::collection::vec(-10.0f64..10.0, c),
            prop::collection::vec(0.0f64..=1.0, c),
            1usize..5,
        ))
    ) {
        let c = lv.len();
        let fl = ArrayD::from_shape_fn(IxDyn(&[1, c, hw, hw]), |i| lv[i[1]]);
        let fg = ArrayD::from_shape_fn(IxDyn(&[1, c, hw, hw]), |i| gv[i[1]]);
        let out = channel_mask_mix(&fl, &fg, &mask).unwrap();
        for (i, &o) in out.indexed_iter() {
            let (a, b) = (lv[i[1]], gv[i[1]]);
            prop_assert!(o >= a.min(b) - 1e-12 && o <= a.max(b) + 1e-12);
        }
    }
}
