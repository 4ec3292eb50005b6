//! ResNet-18/34/50 trunks without the dense classifier.

use crate::attention::{GlobalAttention, LocalAttention, MaskMode};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm2d, Builder, Conv2d, LayerKind};
use crate::ops;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    R18,
    R34,
    R50,
}

impl Depth {
    fn blocks(self) -> [usize; 4] {
        match self {
            Depth::R18 => [2, 2, 2, 2],
            Depth::R34 | Depth::R50 => [3, 4, 6, 3],
        }
    }

    fn expansion(self) -> usize {
        match self {
            Depth::R50 => 4,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResNetSpec {
    pub depth: Depth,
    pub width_multiplier: f64,
    pub global_attention: bool,
    pub local_attention_stages: Vec<usize>,
    pub dbam_depth: usize,
    pub leaky_slope: f64,
    pub mask_mode: MaskMode,
}

pub fn scaled(width: usize, multiplier: f64) -> usize {
    ((width as f64 * multiplier).round() as usize).max(1)
}

impl ResNetSpec {
    pub fn out_channels(&self) -> usize {
        scaled(512, self.width_multiplier) * self.depth.expansion()
    }
}

#[derive(Clone, Debug)]
struct Shortcut {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
enum Block {
    Basic {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        shortcut: Option<Shortcut>,
    },
    Bottleneck {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        conv3: Conv2d,
        bn3: BatchNorm2d,
        shortcut: Option<Shortcut>,
    },
}

impl Block {
    fn build(b: &mut Builder, name: &str, depth: Depth, cin: usize, width: usize, stride: usize) -> (Self, usize) {
        let cout = width * depth.expansion();
        let shortcut = (stride != 1 || cin != cout).then(|| Shortcut {
            conv: Conv2d::new(b, &format!("{name}.downsample.0"), cin, cout, 1, stride, 1, false),
            bn: BatchNorm2d::new(b, &format!("{name}.downsample.1"), cout),
        });
        let block = match depth {
            Depth::R50 => Block::Bottleneck {
                conv1: Conv2d::new(b, &format!("{name}.conv1"), cin, width, 1, 1, 1, false),
                bn1: BatchNorm2d::new(b, &format!("{name}.bn1"), width),
                conv2: Conv2d::new(b, &format!("{name}.conv2"), width, width, 3, stride, 1, false),
                bn2: BatchNorm2d::new(b, &format!("{name}.bn2"), width),
                conv3: Conv2d::new(b, &format!("{name}.conv3"), width, cout, 1, 1, 1, false),
                bn3: BatchNorm2d::new(b, &format!("{name}.bn3"), cout),
                shortcut,
            },
            _ => Block::Basic {
                conv1: Conv2d::new(b, &format!("{name}.conv1"), cin, width, 3, stride, 1, false),
                bn1: BatchNorm2d::new(b, &format!("{name}.bn1"), width),
                conv2: Conv2d::new(b, &format!("{name}.conv2"), width, width, 3, 1, 1, false),
                bn2: BatchNorm2d::new(b, &format!("{name}.bn2"), width),
                shortcut,
            },
        };
        (block, cout)
    }

    fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let (main, shortcut) = match self {
            Block::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let h = ops::relu(&bn1.forward(g, s, &conv1.forward(g, s, x)));
                (bn2.forward(g, s, &conv2.forward(g, s, &h)), shortcut)
            }
            Block::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                shortcut,
            } => {
                let h = ops::relu(&bn1.forward(g, s, &conv1.forward(g, s, x)));
                let h = ops::relu(&bn2.forward(g, s, &conv2.forward(g, s, &h)));
                (bn3.forward(g, s, &conv3.forward(g, s, &h)), shortcut)
            }
        };
        let identity = match shortcut {
            Some(sc) => sc.bn.forward(g, s, &sc.conv.forward(g, s, x)),
            None => x.clone(),
        };
        ops::relu(&ops::add(&main, &identity))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<Block>,
    local_attention: Option<LocalAttention>,
}

#[derive(Clone, Debug)]
pub struct ResNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    global_attention: Option<GlobalAttention>,
    stages: Vec<Stage>,
}

impl ResNet {
    pub fn build(b: &mut Builder, spec: &ResNetSpec) -> Self {
        let stem = scaled(64, spec.width_multiplier);
        let conv1 = Conv2d::new(b, "conv1", 3, stem, 7, 2, 1, false);
        let bn1 = BatchNorm2d::new(b, "bn1", stem);
        b.record("maxpool", LayerKind::MaxPool2d, &[]);
        let global_attention = spec
            .global_attention
            .then(|| GlobalAttention::new(b, "global_attention", stem, spec.leaky_slope));
        let mut cin = stem;
        let mut stages = Vec::new();
        for (si, &n) in spec.depth.blocks().iter().enumerate() {
            let width = scaled(64 << si, spec.width_multiplier);
            let mut blocks = Vec::new();
            for bi in 0..n {
                let stride = if bi == 0 && si > 0 { 2 } else { 1 };
                let (block, cout) = Block::build(b, &format!("layer{}.{bi}", si + 1), spec.depth, cin, width, stride);
                blocks.push(block);
                cin = cout;
            }
            let local_attention = spec.local_attention_stages.contains(&si).then(|| {
                LocalAttention::new(
                    b,
                    &format!("layer{}.local_attention", si + 1),
                    cin,
                    spec.dbam_depth,
                    spec.leaky_slope,
                    spec.mask_mode,
                )
            });
            stages.push(Stage { blocks, local_attention });
        }
        ResNet {
            conv1,
            bn1,
            global_attention,
            stages,
        }
    }

    /// Runs the trunk and returns the final feature map.
    ///
    /// With global attention the gate takes the place of the stem's ReLU,
    /// acting on the (max-pooled) normalised input-conv response so negative
    /// responses survive with a learned weight.
    pub fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: &Var<'g>) -> Var<'g> {
        let mut h = {
            let _scope = g.scope("stem");
            let h = self.bn1.forward(g, s, &self.conv1.forward(g, s, x));
            match &self.global_attention {
                Some(att) => {
                    let pooled = ops::max_pool2d(&h, 3, 2, 1);
                    let _scope = g.scope("global_attention");
                    att.forward(g, s, &pooled)
                }
                None => ops::max_pool2d(&ops::relu(&h), 3, 2, 1),
            }
        };
        g.probe("input", &h);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.blocks.iter().enumerate() {
                let name = format!("layer{}.{bi}", si + 1);
                let _scope = g.scope(name.clone());
                h = block.forward(g, s, &h);
                g.probe(&name, &h);
            }
            if let Some(att) = &stage.local_attention {
                let name = format!("layer{}.local_attention", si + 1);
                let _scope = g.scope(name.clone());
                h = att.forward(g, s, &h);
                g.probe(&name, &h);
            }
        }
        h
    }
}
