//! Global attention gate and dense block attention (DBAM) with channel-mask mixing.
//!
//! The global gate multiplies a feature map elementwise by weights
//! `W = sigmoid(conv₂(leaky_relu(conv₁(x))))`, where both convolutions are
//! 3×3 and keep the channel count. Nothing is pooled, so every position and
//! channel gets its own weight.
//!
//! DBAM produces one spatial attention map per channel from depthwise 3×3
//! convolutions (leaky ReLU between them, sigmoid at the end), so no map ever
//! sees another channel and no pooling is involved. Its output `F_L = A ⊙ x`
//! is blended with the unattended features `F_G` through a learned per-channel
//! mask:
//!
//! ```text
//! F_(L+G) = M_C ⊙ F_L + (1 − M_C) ⊙ F_G,    M_C = sigmoid(mask_logits) ∈ (0,1)^K
//! ```
//!
//! The mask is relaxed to the open interval so it can be trained by gradient
//! descent; [`MaskMode::Hard`] thresholds it at 0.5 for inference.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Builder, Conv2d, LayerKind};
use crate::ops::{self, ConvSpec};
use crate::params::{he_normal, zeros, ParamId, ParamKind, ParamStore, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_DBAM_DEPTH: usize = 2;

const SAME_3X3: ConvSpec = ConvSpec {
    stride: 1,
    padding: 1,
    groups: 1,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// `M_C = sigmoid(logits)`.
    #[default]
    Soft,
    /// `M_C = [sigmoid(logits) ≥ 0.5]`; only applied outside training.
    Hard,
}

/// Weights of the global attention gate for a `C`-channel feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalAttentionParams {
    /// `[C, C, 3, 3]`
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub leaky_slope: f64,
}

impl GlobalAttentionParams {
    pub fn channels(&self) -> usize {
        self.conv1_weight.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, w) in [("conv1_weight", &self.conv1_weight), ("conv2_weight", &self.conv2_weight)] {
            if w.shape() != [c, c, 3, 3] {
                return Err(Error::config(
                    format!("global_attention.{name}"),
                    format!("expected shape [{c}, {c}, 3, 3], got {:?}", w.shape()),
                ));
            }
        }
        for (name, b) in [("conv1_bias", &self.conv1_bias), ("conv2_bias", &self.conv2_bias)] {
            if b.shape() != [c] {
                return Err(Error::config(format!("global_attention.{name}"), format!("expected length {c}")));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("global_attention.leaky_slope", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Weights of a DBAM block for a `K`-channel feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAttentionParams {
    /// Depthwise 3×3 layers, each `([K, 1, 3, 3], [K])`.
    pub depthwise: Vec<(Tensor, Tensor)>,
    /// `[K]`; the effective mask is `sigmoid` of these.
    pub channel_mask_logits: Tensor,
    pub leaky_slope: f64,
}

impl LocalAttentionParams {
    pub fn channels(&self) -> usize {
        self.channel_mask_logits.len()
    }

    /// `M_C = sigmoid(channel_mask_logits)`.
    pub fn mask(&self) -> Array1<f64> {
        self.channel_mask_logits.iter().map(|&v| ops::sigmoid_scalar(v)).collect()
    }

    fn validate(&self) -> Result<()> {
        let k = self.channels();
        if self.depthwise.is_empty() {
            return Err(Error::config("local_attention.depthwise", "at least one depthwise layer required"));
        }
        for (i, (w, b)) in self.depthwise.iter().enumerate() {
            if w.shape() != [k, 1, 3, 3] || b.shape() != [k] {
                return Err(Error::config(
                    format!("local_attention.depthwise[{i}]"),
                    format!("expected weight [{k}, 1, 3, 3] and bias [{k}]"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub global: GlobalAttentionParams,
    pub local: LocalAttentionParams,
}

fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    if x.ndim() != 4 {
        return Err(Error::Shape(format!("{what}: expected NCHW feature map, got {:?}", x.shape())));
    }
    if x.shape()[1] != expected {
        return Err(Error::config(
            format!("{what}.channels"),
            format!("feature map has {} channels but parameters expect {expected}", x.shape()[1]),
        ));
    }
    Ok(())
}

/// Gate on the graph: `x ⊙ sigmoid(conv₂(leaky(conv₁(x))))`.
pub fn global_attention<'g>(x: &Var<'g>, w1: &Var<'g>, b1: &Var<'g>, w2: &Var<'g>, b2: &Var<'g>, slope: f64) -> Var<'g> {
    let h = ops::leaky_relu(&ops::conv2d(x, w1, Some(b1), SAME_3X3), slope);
    let weights = ops::sigmoid(&ops::conv2d(&h, w2, Some(b2), SAME_3X3));
    ops::mul(x, &weights)
}

/// DBAM attention maps `A` on the graph, one map per channel.
pub fn dbam_attention_maps<'g>(x: &Var<'g>, layers: &[(Var<'g>, Var<'g>)], slope: f64) -> Var<'g> {
    let channels = x.shape()[1];
    let spec = ConvSpec::new(1, 1, channels);
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = ops::conv2d(&h, w, Some(b), spec);
        if i + 1 < layers.len() {
            h = ops::leaky_relu(&h, slope);
        }
    }
    ops::sigmoid(&h)
}

/// `F_L = A ⊙ x` on the graph.
pub fn dbam<'g>(x: &Var<'g>, layers: &[(Var<'g>, Var<'g>)], slope: f64) -> Var<'g> {
    ops::mul(x, &dbam_attention_maps(x, layers, slope))
}

/// Applies the global attention gate to `x`.
pub fn global_attention_forward(x: &Tensor, p: &GlobalAttentionParams) -> Result<Tensor> {
    p.validate()?;
    check_channels(x, p.channels(), "global_attention")?;
    let g = Graph::eval();
    let out = global_attention(
        &g.input(x.clone()),
        &g.input(p.conv1_weight.clone()),
        &g.input(p.conv1_bias.clone()),
        &g.input(p.conv2_weight.clone()),
        &g.input(p.conv2_bias.clone()),
        p.leaky_slope,
    );
    Ok(out.value().clone())
}

/// Computes `F_L = A ⊙ x` with per-channel attention maps `A ∈ (0,1)^{K×H×W}`.
pub fn dbam_forward(x: &Tensor, p: &LocalAttentionParams) -> Result<Tensor> {
    p.validate()?;
    check_channels(x, p.channels(), "local_attention")?;
    let g = Graph::eval();
    let layers: Vec<_> = p.depthwise.iter().map(|(w, b)| (g.input(w.clone()), g.input(b.clone()))).collect();
    Ok(dbam(&g.input(x.clone()), &layers, p.leaky_slope).value().clone())
}

/// The attention maps `A` that [`dbam_forward`] multiplies into `x`.
pub fn dbam_maps(x: &Tensor, p: &LocalAttentionParams) -> Result<Tensor> {
    p.validate()?;
    check_channels(x, p.channels(), "local_attention")?;
    let g = Graph::eval();
    let layers: Vec<_> = p.depthwise.iter().map(|(w, b)| (g.input(w.clone()), g.input(b.clone()))).collect();
    Ok(dbam_attention_maps(&g.input(x.clone()), &layers, p.leaky_slope).value().clone())
}

/// `out[c] = mask[c]·f_l[c] + (1 − mask[c])·f_g[c]` for every channel `c`.
pub fn channel_mask_mix(f_l: &Tensor, f_g: &Tensor, mask: &[f64]) -> Result<Tensor> {
    if f_l.shape() != f_g.shape() {
        return Err(Error::Shape(format!(
            "local features {:?} and global features {:?} differ",
            f_l.shape(),
            f_g.shape()
        )));
    }
    if f_l.ndim() != 4 {
        return Err(Error::Shape(format!("expected NCHW feature maps, got {:?}", f_l.shape())));
    }
    let k = f_l.shape()[1];
    if mask.len() != k {
        return Err(Error::Shape(format!("mask has length {} but feature maps have {k} channels", mask.len())));
    }
    if let Some(bad) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::InvalidArgument(format!("mask entry {bad} outside [0, 1]")));
    }
    let g = Graph::eval();
    let m = g.input(Tensor::from_shape_vec(ndarray::IxDyn(&[k]), mask.to_vec()).expect("1-D mask"));
    Ok(ops::channel_mix(&g.input(f_l.clone()), &g.input(f_g.clone()), &m).value().clone())
}

/// Draws fresh global and local attention weights for `channels` channels.
///
/// Convolution weights are He-normal (std `sqrt(2 / fan_in)`, fan-in `9·C`
/// for the gate and 9 for the depthwise layers), biases start at zero and the
/// mask logits start at zero so `M_C = 0.5` weighs local and global features
/// equally.
pub fn init_attention_params<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> AttentionParams {
    init_attention_params_with(channels, DEFAULT_DBAM_DEPTH, DEFAULT_LEAKY_SLOPE, rng)
}

pub fn init_attention_params_with<R: Rng + ?Sized>(channels: usize, dbam_depth: usize, leaky_slope: f64, rng: &mut R) -> AttentionParams {
    let c = channels.max(1);
    let global = GlobalAttentionParams {
        conv1_weight: he_normal(&[c, c, 3, 3], 9 * c, rng),
        conv1_bias: zeros(&[c]),
        conv2_weight: he_normal(&[c, c, 3, 3], 9 * c, rng),
        conv2_bias: zeros(&[c]),
        leaky_slope,
    };
    let depthwise = (0..dbam_depth.max(1)).map(|_| (he_normal(&[c, 1, 3, 3], 9, rng), zeros(&[c]))).collect();
    let local = LocalAttentionParams {
        depthwise,
        channel_mask_logits: zeros(&[c]),
        leaky_slope,
    };
    AttentionParams { global, local }
}

/// Global attention gate registered inside a model.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    conv1: Conv2d,
    conv2: Conv2d,
    slope: f64,
}

impl GlobalAttention {
    pub fn new(b: &mut Builder, name: &str, channels: usize, slope: f64) -> Self {
        let conv1 = Conv2d::unlisted(b, &format!("{name}.conv1"), channels, channels, 3, 1, 1, true);
        let conv2 = Conv2d::unlisted(b, &format!("{name}.conv2"), channels, channels, 3, 1, 1, true);
        let params: Vec<ParamId> = conv1.params().into_iter().chain(conv2.params()).collect();
        b.record(name, LayerKind::GlobalAttention, &params);
        GlobalAttention { conv1, conv2, slope }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let p = |id| g.param(store, id);
        global_attention(
            x,
            &p(self.conv1.weight),
            &p(self.conv1.bias.expect("gate conv has bias")),
            &p(self.conv2.weight),
            &p(self.conv2.bias.expect("gate conv has bias")),
            self.slope,
        )
    }
}

/// DBAM followed by channel-mask mixing, registered inside a model.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    layers: Vec<(ParamId, ParamId)>,
    mask_logits: ParamId,
    slope: f64,
    mask_mode: MaskMode,
}

impl LocalAttention {
    pub fn new(b: &mut Builder, name: &str, channels: usize, depth: usize, slope: f64, mask_mode: MaskMode) -> Self {
        let mut params = Vec::new();
        let layers = (0..depth.max(1))
            .map(|i| {
                let init = he_normal(&[channels, 1, 3, 3], 9, &mut b.rng);
                let w = b.param(format!("{name}.dw{i}.weight"), ParamKind::Weight, init);
                let bias = b.param(format!("{name}.dw{i}.bias"), ParamKind::Bias, zeros(&[channels]));
                params.extend([w, bias]);
                (w, bias)
            })
            .collect();
        let mask_logits = b.param(format!("{name}.mask_logits"), ParamKind::MaskLogits, zeros(&[channels]));
        params.push(mask_logits);
        b.record(name, LayerKind::LocalAttention, &params);
        LocalAttention {
            layers,
            mask_logits,
            slope,
            mask_mode,
        }
    }

    /// Returns `F_(L+G)` for global features `f_g`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, f_g: &Var<'g>) -> Var<'g> {
        let layers: Vec<_> = self.layers.iter().map(|&(w, b)| (g.param(store, w), g.param(store, b))).collect();
        let f_l = dbam(f_g, &layers, self.slope);
        let logits = g.param(store, self.mask_logits);
        let mask = if self.mask_mode == MaskMode::Hard && !g.records_grad() {
            g.input(logits.value().mapv(|v| if ops::sigmoid_scalar(v) >= 0.5 { 1.0 } else { 0.0 }))
        } else {
            ops::sigmoid(&logits)
        };
        ops::channel_mix(&f_l, f_g, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    // Straight-line reference: zero-padded 3×3 convolution with explicit loops.
    fn ref_conv3(x: &Tensor, w: &Tensor, b: &Tensor, depthwise: bool) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let o = w.shape()[0];
        let mut out = Tensor::zeros(IxDyn(&[n, o, h, wd]));
        for ni in 0..n {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[[oc]];
                        let chans: Vec<usize> = if depthwise { vec![oc] } else { (0..c).collect() };
                        for (k, &ic) in chans.iter().enumerate() {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (iy, ix) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let wi = if depthwise { w[[oc, 0, dy, dx]] } else { w[[oc, k, dy, dx]] };
                                    acc += wi * x[[ni, ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                        out[[ni, oc, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    fn leaky(v: f64, s: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            s * v
        }
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn global_gate_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = init_attention_params(4, &mut rng).global;
        let x = randn(&[1, 4, 8, 8], &mut rng);
        let got = global_attention_forward(&x, &p).unwrap();
        let h = ref_conv3(&x, &p.conv1_weight, &p.conv1_bias, false).mapv(|v| leaky(v, p.leaky_slope));
        let w = ref_conv3(&h, &p.conv2_weight, &p.conv2_bias, false).mapv(sig);
        let expected = &x * &w;
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dbam_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = init_attention_params(3, &mut rng).local;
        for (_, b) in p.depthwise.iter_mut() {
            *b = randn(&[3], &mut rng);
        }
        let x = randn(&[2, 3, 6, 5], &mut rng);
        let got = dbam_forward(&x, &p).unwrap();
        let h = ref_conv3(&x, &p.depthwise[0].0, &p.depthwise[0].1, true).mapv(|v| leaky(v, p.leaky_slope));
        let a = ref_conv3(&h, &p.depthwise[1].0, &p.depthwise[1].1, true).mapv(sig);
        let expected = &x * &a;
        assert_eq!(got.shape(), x.shape());
        for (u, v) in got.iter().zip(expected.iter()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_input_is_annihilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = init_attention_params(3, &mut rng);
        let x = Tensor::zeros(IxDyn(&[1, 3, 5, 5]));
        assert!(global_attention_forward(&x, &p.global).unwrap().iter().all(|&v| v == 0.0));
        assert!(dbam_forward(&x, &p.local).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = init_attention_params(2, &mut rng).global;
        p.conv2_weight.fill(0.0);
        p.conv2_bias.fill(40.0);
        let x = randn(&[1, 2, 4, 4], &mut rng);
        let y = global_attention_forward(&x, &p).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn per_channel_maps_differ_for_identical_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = init_attention_params(2, &mut rng).local;
        let plane = randn(&[1, 1, 5, 5], &mut rng);
        let mut x = Tensor::zeros(IxDyn(&[1, 2, 5, 5]));
        for c in 0..2 {
            x.slice_mut(ndarray::s![.., c..c + 1, .., ..]).assign(&plane.view().into_dimensionality::<ndarray::Ix4>().unwrap());
        }
        let a = dbam_maps(&x, &p).unwrap();
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        let diff: f64 = (0..25).map(|i| (a[[0, 0, i / 5, i % 5]] - a[[0, 1, i / 5, i % 5]]).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let fl = Tensor::from_elem(IxDyn(&[1, 2, 3, 3]), 2.0);
        let fg = Tensor::from_elem(IxDyn(&[1, 2, 3, 3]), 4.0);
        assert_eq!(channel_mask_mix(&fl, &fg, &[1.0, 1.0]).unwrap(), fl);
        assert_eq!(channel_mask_mix(&fl, &fg, &[0.0, 0.0]).unwrap(), fg);
        assert!(channel_mask_mix(&fl, &fg, &[0.5, 0.5]).unwrap().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn mismatches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = init_attention_params(3, &mut rng);
        let x = Tensor::zeros(IxDyn(&[1, 4, 5, 5]));
        assert!(matches!(global_attention_forward(&x, &p.global), Err(Error::Config { .. })));
        assert!(matches!(dbam_forward(&x, &p.local), Err(Error::Config { .. })));
        let y = Tensor::zeros(IxDyn(&[1, 4, 5, 4]));
        assert!(channel_mask_mix(&x, &y, &[0.5; 4]).is_err());
        assert!(channel_mask_mix(&x, &x, &[0.5; 3]).is_err());
        assert!(channel_mask_mix(&x, &x, &[0.5, 0.5, 0.5, 1.5]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_mask_starts_at_half() {
        let a = init_attention_params(5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = init_attention_params(5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.local.mask().iter().all(|&m| m == 0.5));
        let one = init_attention_params(1, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(one.global.conv1_weight.shape(), &[1, 1, 3, 3]);
        let x = Tensor::ones(IxDyn(&[1, 1, 3, 3]));
        assert!(global_attention_forward(&x, &one.global).is_ok());
        assert!(dbam_forward(&x, &one.local).is_ok());
    }
}
