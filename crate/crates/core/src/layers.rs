//! Parameterised building blocks and the layer inventory they register.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::ops::{self, ConvSpec};
use crate::params::{he_normal, ones, zeros, ParamId, ParamKind, ParamStore, Section};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d,
    BatchNorm2d,
    MaxPool2d,
    GlobalAttention,
    LocalAttention,
    SqueezeExcite,
    ChannelShuffle,
    GlobalAvgPool,
    LayerNorm,
    Linear,
    Dropout,
}

/// One entry of a model's ordered layer inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDescription {
    pub name: String,
    pub kind: LayerKind,
    pub section: Section,
    pub param_shapes: Vec<Vec<usize>>,
    /// Learnable scalars owned by this layer (running statistics excluded).
    pub param_count: usize,
}

/// Accumulates parameters and the inventory while a network is constructed.
pub struct Builder {
    pub store: ParamStore,
    pub inventory: Vec<LayerDescription>,
    pub rng: ChaCha8Rng,
    section: Section,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            inventory: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            section: Section::Feature,
        }
    }

    pub fn set_section(&mut self, section: Section) {
        self.section = section;
    }

    pub fn section(&self) -> Section {
        self.section
    }

    pub fn param(&mut self, name: String, kind: ParamKind, value: crate::params::Tensor) -> ParamId {
        self.store.add(name, kind, self.section, value)
    }

    /// Adds an inventory entry covering `params`.
    pub fn record(&mut self, name: impl Into<String>, kind: LayerKind, params: &[ParamId]) {
        let (mut shapes, mut count) = (Vec::new(), 0);
        for &id in params {
            let e = self.store.entry(id);
            if e.kind.learnable() {
                shapes.push(e.value.shape().to_vec());
                count += e.numel();
            }
        }
        self.inventory.push(LayerDescription {
            name: name.into(),
            kind,
            section: self.section,
            param_shapes: shapes,
            param_count: count,
        });
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// Registers the parameters without adding an inventory entry (for use inside composites).
    #[allow(clippy::too_many_arguments)]
    pub fn unlisted(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin / groups * k * k;
        let w = he_normal(&[cout, cin / groups, k, k], fan_in, &mut b.rng);
        let weight = b.param(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = bias.then(|| b.param(format!("{name}.bias"), ParamKind::Bias, zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            spec: ConvSpec::new(stride, k / 2, groups),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, bias: bool) -> Self {
        let conv = Self::unlisted(b, name, cin, cout, k, stride, groups, bias);
        b.record(name, LayerKind::Conv2d, &conv.params());
        conv
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        ops::conv2d(x, &w, b.as_ref(), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn unlisted(b: &mut Builder, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: b.param(format!("{name}.weight"), ParamKind::NormScale, ones(&[channels])),
            beta: b.param(format!("{name}.bias"), ParamKind::NormShift, zeros(&[channels])),
            running_mean: b.param(format!("{name}.running_mean"), ParamKind::RunningMean, zeros(&[channels])),
            running_var: b.param(format!("{name}.running_var"), ParamKind::RunningVar, ones(&[channels])),
        }
    }

    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        let bn = Self::unlisted(b, name, channels);
        b.record(name, LayerKind::BatchNorm2d, &bn.params());
        bn
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if g.is_training() {
            let (y, stats) = ops::batch_norm_train(x, &gamma, &beta, Self::EPS);
            let m = Self::MOMENTUM;
            let mut rm = (**store.value(self.running_mean)).clone();
            let mut rv = (**store.value(self.running_var)).clone();
            rm.iter_mut().zip(&stats.mean).for_each(|(r, s)| *r = (1.0 - m) * *r + m * s);
            rv.iter_mut().zip(&stats.var_unbiased).for_each(|(r, s)| *r = (1.0 - m) * *r + m * s);
            g.record_buffer(self.running_mean, rm);
            g.record_buffer(self.running_var, rv);
            y
        } else {
            ops::batch_norm_eval(
                x,
                &gamma,
                &beta,
                store.value(self.running_mean),
                store.value(self.running_var),
                Self::EPS,
            )
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let ln = LayerNorm {
            gamma: b.param(format!("{name}.weight"), ParamKind::NormScale, ones(&[dim])),
            beta: b.param(format!("{name}.bias"), ParamKind::NormShift, zeros(&[dim])),
        };
        b.record(name, LayerKind::LayerNorm, &[ln.gamma, ln.beta]);
        ln
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        ops::layer_norm(x, &g.param(store, self.gamma), &g.param(store, self.beta), Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize) -> Self {
        let w = he_normal(&[dout, din], din, &mut b.rng).mapv(|v| v / 2f64.sqrt());
        let lin = Linear {
            weight: b.param(format!("{name}.weight"), ParamKind::Weight, w),
            bias: b.param(format!("{name}.bias"), ParamKind::Bias, zeros(&[dout])),
        };
        b.record(name, LayerKind::Linear, &[lin.weight, lin.bias]);
        lin
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: &Var<'g>) -> Var<'g> {
        ops::linear(x, &g.param(store, self.weight), Some(&g.param(store, self.bias)))
    }
}
