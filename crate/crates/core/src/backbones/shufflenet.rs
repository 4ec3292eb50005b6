//! ShuffleNet-v2+ trunk adapted for re-identification.
//!
//! Stage table (width multiplier 1.0, input 224×224):
//!
//! | stage | blocks | out channels | block choices            | activation | SE  |
//! |-------|--------|--------------|--------------------------|------------|-----|
//! | stem  | conv3×3/2 | 16        |                          | h-swish    |     |
//! | 1     | 4      | 36           | 3×3, 3×3, xception, 5×5  | ReLU       | no  |
//! | 2     | 4      | 104          | 5×5, 5×5, 3×3, 3×3       | h-swish    | no  |
//! | 3     | 8      | 208          | 7×7, 3×3, 7×7, 5×5, 5×5, 3×3, 7×7, 3×3 | h-swish | yes |
//! | 4     | 4      | 416          | 7×7, 5×5, xception, 7×7  | h-swish    | yes |
//! | last  | conv1×1 | 1280        |                          | h-swish    |     |
//!
//! Relative to the classification network, the squeeze-excite on the pooled
//! 1280-d vector, the dropout and both dense layers are gone; the
//! re-identification feature is the global average of the last conv output.
//! Where local attention is placed (after the first block of a stage), one
//! extra stride-1 Shuffle-Xception block follows it.

use crate::attention::{GlobalAttention, LocalAttention, MaskMode};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm2d, Builder, Conv2d, LayerKind};
use crate::ops;
use crate::params::ParamStore;

pub const STAGE_WIDTHS: [usize; 4] = [36, 104, 208, 416];
pub const STAGE_REPEATS: [usize; 4] = [4, 4, 8, 4];
pub const STEM_WIDTH: usize = 16;
pub const LAST_WIDTH: usize = 1280;
/// Block choice per position: 0/1/2 = ShuffleNet unit with 3/5/7 kernel, 3 = Shuffle-Xception.
pub const ARCHITECTURE: [usize; 20] = [0, 0, 3, 1, 1, 1, 0, 0, 2, 0, 2, 1, 1, 0, 2, 0, 2, 1, 3, 2];

#[derive(Clone, Debug)]
pub struct ShuffleSpec {
    pub width_multiplier: f64,
    pub global_attention: bool,
    pub local_attention_stages: Vec<usize>,
    pub dbam_depth: usize,
    pub leaky_slope: f64,
    pub mask_mode: MaskMode,
}

/// Scales a width and rounds to a multiple of 4 (channel split needs even halves).
pub fn scaled4(width: usize, multiplier: f64) -> usize {
    ((((width as f64) * multiplier / 4.0).round() as usize) * 4).max(4)
}

impl ShuffleSpec {
    pub fn out_channels(&self) -> usize {
        scaled4(LAST_WIDTH, self.width_multiplier)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Relu,
    HardSwish,
}

fn act<'g>(a: Act, x: &Var<'g>) -> Var<'g> {
    match a {
        Act::Relu => ops::relu(x),
        Act::HardSwish => ops::hard_swish(x),
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Self {
        ConvBn {
            conv: Conv2d::new(b, &format!("{name}.conv"), cin, cout, k, stride, groups, false),
            bn: BatchNorm2d::new(b, &format!("{name}.bn"), cout),
        }
    }

    fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: &Var<'g>) -> Var<'g> {
        self.bn.forward(g, s, &self.conv.forward(g, s, x))
    }
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    reduce: Conv2d,
    bn: BatchNorm2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        let r = (c / 4).max(1);
        let reduce = Conv2d::unlisted(b, &format!("{name}.reduce"), c, r, 1, 1, 1, false);
        let bn = BatchNorm2d::unlisted(b, &format!("{name}.bn"), r);
        let expand = Conv2d::unlisted(b, &format!("{name}.expand"), r, c, 1, 1, 1, false);
        let params: Vec<_> = reduce.params().into_iter().chain(bn.params()).chain(expand.params()).collect();
        b.record(name, LayerKind::SqueezeExcite, &params);
        SqueezeExcite { reduce, bn, expand }
    }

    fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let pooled = ops::reshape(&ops::global_avg_pool(x), &[n, c, 1, 1]);
        let h = ops::relu(&self.bn.forward(g, s, &self.reduce.forward(g, s, &pooled)));
        let w = ops::hard_sigmoid(&self.expand.forward(g, s, &h));
        ops::scale_planes(x, &ops::reshape(&w, &[n, c]))
    }
}

#[derive(Clone, Debug)]
struct Unit {
    stride: usize,
    act: Act,
    /// Alternating depthwise / pointwise layers of the main branch.
    main: Vec<(ConvBn, bool)>,
    se: Option<SqueezeExcite>,
    proj: Option<(ConvBn, ConvBn)>,
}

impl Unit {
    #[allow(clippy::too_many_arguments)]
    fn build(b: &mut Builder, name: &str, cin: usize, cout: usize, choice: usize, stride: usize, act: Act, se: bool) -> Self {
        let inp = if stride == 2 { cin } else { cin / 2 };
        let outputs = cout - inp;
        let mid = cout / 2;
        if stride == 1 {
            b.record(format!("{name}.shuffle"), LayerKind::ChannelShuffle, &[]);
        }
        let main = if choice == 3 {
            vec![
                (ConvBn::new(b, &format!("{name}.main.0"), inp, inp, 3, stride, inp), false),
                (ConvBn::new(b, &format!("{name}.main.1"), inp, mid, 1, 1, 1), true),
                (ConvBn::new(b, &format!("{name}.main.2"), mid, mid, 3, 1, mid), false),
                (ConvBn::new(b, &format!("{name}.main.3"), mid, mid, 1, 1, 1), true),
                (ConvBn::new(b, &format!("{name}.main.4"), mid, mid, 3, 1, mid), false),
                (ConvBn::new(b, &format!("{name}.main.5"), mid, outputs, 1, 1, 1), true),
            ]
        } else {
            let k = [3, 5, 7][choice];
            vec![
                (ConvBn::new(b, &format!("{name}.main.0"), inp, mid, 1, 1, 1), true),
                (ConvBn::new(b, &format!("{name}.main.1"), mid, mid, k, stride, mid), false),
                (ConvBn::new(b, &format!("{name}.main.2"), mid, outputs, 1, 1, 1), true),
            ]
        };
        let se = se.then(|| SqueezeExcite::new(b, &format!("{name}.se"), outputs));
        let proj = (stride == 2).then(|| {
            let k = if choice == 3 { 3 } else { [3, 5, 7][choice] };
            (
                ConvBn::new(b, &format!("{name}.proj.0"), inp, inp, k, 2, inp),
                ConvBn::new(b, &format!("{name}.proj.1"), inp, inp, 1, 1, 1),
            )
        });
        Unit {
            stride,
            act,
            main,
            se,
            proj,
        }
    }

    fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let (passthrough, input) = if self.stride == 1 {
            (ops::select_channels(x, 0, 2), ops::select_channels(x, 1, 2))
        } else {
            let (dw, pw) = self.proj.as_ref().expect("stride-2 unit has a projection branch");
            let p = act(self.act, &pw.forward(g, s, &dw.forward(g, s, x)));
            (p, x.clone())
        };
        let mut h = input;
        for (layer, activated) in &self.main {
            h = layer.forward(g, s, &h);
            if *activated {
                h = act(self.act, &h);
            }
        }
        if let Some(se) = &self.se {
            h = se.forward(g, s, &h);
        }
        ops::concat_channels(&[&passthrough, &h])
    }
}

#[derive(Clone, Debug)]
struct Stage {
    units: Vec<Unit>,
    local_attention: Option<(LocalAttention, Unit)>,
}

#[derive(Clone, Debug)]
pub struct ShuffleNet {
    stem: ConvBn,
    global_attention: Option<GlobalAttention>,
    stages: Vec<Stage>,
    last: ConvBn,
}

impl ShuffleNet {
    pub fn build(b: &mut Builder, spec: &ShuffleSpec) -> Self {
        let m = spec.width_multiplier;
        let stem_c = scaled4(STEM_WIDTH, m);
        let stem = ConvBn::new(b, "first_conv", 3, stem_c, 3, 2, 1);
        let global_attention = spec
            .global_attention
            .then(|| GlobalAttention::new(b, "global_attention", stem_c, spec.leaky_slope));
        let mut cin = stem_c;
        let mut arch = ARCHITECTURE.iter();
        let mut stages = Vec::new();
        for si in 0..4 {
            // Downsampling units concatenate the input, so each stage must widen.
            let cout = scaled4(STAGE_WIDTHS[si], m).max(cin + 4);
            let act = if si == 0 { Act::Relu } else { Act::HardSwish };
            let se = si >= 2;
            let mut units = Vec::new();
            let mut local_attention = None;
            for bi in 0..STAGE_REPEATS[si] {
                let stride = if bi == 0 { 2 } else { 1 };
                let choice = *arch.next().expect("architecture covers every block");
                units.push(Unit::build(b, &format!("stage{}.{bi}", si + 1), cin, cout, choice, stride, act, se));
                cin = cout;
                if bi == 0 && spec.local_attention_stages.contains(&si) {
                    let att = LocalAttention::new(
                        b,
                        &format!("stage{}.local_attention", si + 1),
                        cout,
                        spec.dbam_depth,
                        spec.leaky_slope,
                        spec.mask_mode,
                    );
                    let extra = Unit::build(b, &format!("stage{}.extra_xception", si + 1), cout, cout, 3, 1, act, false);
                    local_attention = Some((att, extra));
                }
            }
            stages.push(Stage { units, local_attention });
        }
        let last = ConvBn::new(b, "conv_last", cin, spec.out_channels(), 1, 1, 1);
        ShuffleNet {
            stem,
            global_attention,
            stages,
            last,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let mut h = {
            let _scope = g.scope("stem");
            let h = self.stem.forward(g, s, x);
            match &self.global_attention {
                Some(att) => {
                    let _scope = g.scope("global_attention");
                    att.forward(g, s, &h)
                }
                None => ops::hard_swish(&h),
            }
        };
        g.probe("input", &h);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, unit) in stage.units.iter().enumerate() {
                let name = format!("stage{}.{bi}", si + 1);
                {
                    let _scope = g.scope(name.clone());
                    h = unit.forward(g, s, &h);
                }
                g.probe(&name, &h);
                if bi == 0 {
                    if let Some((att, extra)) = &stage.local_attention {
                        let name = format!("stage{}.local_attention", si + 1);
                        {
                            let _scope = g.scope(name.clone());
                            h = att.forward(g, s, &h);
                        }
                        g.probe(&name, &h);
                        let name = format!("stage{}.extra_xception", si + 1);
                        let _scope = g.scope(name.clone());
                        h = extra.forward(g, s, &h);
                        g.probe(&name, &h);
                    }
                }
            }
        }
        let _scope = g.scope("conv_last");
        let h = ops::hard_swish(&self.last.forward(g, s, &h));
        g.probe("conv_last", &h);
        h
    }
}
