//! Programmatic builders for the classification backbones: PeleeNet with
//! every ablation toggle, a DenseNet-41 baseline, and MobileNet v1 as the
//! depthwise-separable comparison model.

use crate::cost::{count_flops, CostReport};
use crate::detector::{self, DetectorConfig, HeadKernel};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId, NodeKind};
use crate::ops::{ConvSpec, PoolMode, PoolSpec};

pub const BN_EPSILON: f32 = 1e-5;

/// Ordering of the composite function around each convolution.
/// Post-activation (conv - bn - relu) admits batch-norm folding at
/// inference time; pre-activation (bn - relu - conv) does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationOrder {
    #[default]
    Post,
    Pre,
}

/// Every architectural knob of PeleeNet. The defaults reproduce the full
/// network: stem block, two-way dense layers with dynamically sized
/// bottlenecks, compression-free transitions, post-activation ordering.
#[derive(Debug, Clone)]
pub struct PeleeConfig {
    pub growth_rate: usize,
    pub stage_layers: [usize; 4],
    pub bottleneck_width_multipliers: [usize; 4],
    pub use_stem: bool,
    pub two_way: bool,
    pub dynamic_bottleneck: bool,
    /// Transition-layer channel compression factor in (0, 1]; 1 keeps the
    /// channel count unchanged.
    pub compression: f64,
    pub activation_order: ActivationOrder,
    /// Extra dense layers appended to the last stage ("go deeper").
    pub extra_dense_layers: usize,
    pub num_classes: usize,
}

impl Default for PeleeConfig {
    fn default() -> Self {
        PeleeConfig {
            growth_rate: 32,
            stage_layers: [3, 4, 8, 6],
            bottleneck_width_multipliers: [1, 2, 4, 4],
            use_stem: true,
            two_way: true,
            dynamic_bottleneck: true,
            compression: 1.0,
            activation_order: ActivationOrder::Post,
            extra_dense_layers: 0,
            num_classes: 1000,
        }
    }
}

impl PeleeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.growth_rate == 0 || self.growth_rate % 2 != 0 {
            return Err(Error::Invalid(format!(
                "growth rate {} must be positive and even (each branch emits half)",
                self.growth_rate
            )));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Invalid(format!(
                "compression factor {} outside (0, 1]",
                self.compression
            )));
        }
        if self.stage_layers.iter().any(|&l| l == 0) || self.num_classes == 0 {
            return Err(Error::Invalid(
                "stage layer counts and class count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-branch width of the 1x1 bottleneck inside a dense layer.
///
/// With dynamic sizing the base width is `(k/2) *
/// bottleneck_width_multipliers[stage]`; whenever that would exceed half the
/// incoming channels it is clamped to `4 * floor(in/8)` (half the input,
/// floored to a multiple of four; 1 when fewer than 8 channels come in), so
/// the two branch bottlenecks together never exceed the input width. With
/// dynamic sizing off the original fixed `4 * k` convention applies.
pub fn bottleneck_channels(
    in_channels: usize,
    growth_rate: usize,
    stage_index: usize,
    cfg: &PeleeConfig,
) -> usize {
    if !cfg.dynamic_bottleneck {
        return 4 * growth_rate;
    }
    let base = (growth_rate / 2) * cfg.bottleneck_width_multipliers[stage_index];
    if 2 * base > in_channels {
        (4 * (in_channels / 8)).max(1)
    } else {
        base
    }
}

/// Builder with the composite conv-bn-relu function threaded through it.
pub struct Composer {
    pub b: GraphBuilder,
    pub order: ActivationOrder,
}

impl Composer {
    pub fn new(order: ActivationOrder) -> Self {
        Composer {
            b: GraphBuilder::new(),
            order,
        }
    }

    pub fn over(b: GraphBuilder, order: ActivationOrder) -> Self {
        Composer { b, order }
    }

    /// Convolution wrapped in the composite function.
    pub fn unit(&mut self, name: &str, input: NodeId, spec: ConvSpec) -> Result<NodeId> {
        match self.order {
            ActivationOrder::Post => {
                let conv = self.b.add(name, NodeKind::Conv(spec.clone()), &[input])?;
                let bn = self.b.add(
                    format!("{name}.bn"),
                    NodeKind::BatchNorm {
                        channels: spec.out_channels,
                        epsilon: BN_EPSILON,
                    },
                    &[conv],
                )?;
                self.b.add(format!("{name}.relu"), NodeKind::Relu, &[bn])
            }
            ActivationOrder::Pre => {
                let bn = self.b.add(
                    format!("{name}.bn"),
                    NodeKind::BatchNorm {
                        channels: spec.in_channels,
                        epsilon: BN_EPSILON,
                    },
                    &[input],
                )?;
                let relu = self.b.add(format!("{name}.relu"), NodeKind::Relu, &[bn])?;
                self.b.add(name, NodeKind::Conv(spec), &[relu])
            }
        }
    }

    /// Bare convolution, no normalization or activation.
    pub fn conv(&mut self, name: &str, input: NodeId, spec: ConvSpec) -> Result<NodeId> {
        self.b.add(name, NodeKind::Conv(spec), &[input])
    }

    pub fn pool(&mut self, name: &str, input: NodeId, spec: PoolSpec) -> Result<NodeId> {
        self.b.add(name, NodeKind::Pool(spec), &[input])
    }

    pub fn concat(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        self.b.add(name, NodeKind::Concat, inputs)
    }
}

fn pool2x2(mode: PoolMode) -> PoolSpec {
    PoolSpec {
        mode,
        kernel: 2,
        stride: 2,
        ceil_mode: true,
    }
}

/// Stride-4 front end: a 3x3/2 convolution followed by two parallel
/// branches (1x1 reduce + 3x3/2 convolution, and a 2x2/2 max pool) whose
/// concatenation is projected back to 32 channels. Contributes 4
/// convolutions; output at a 224 input is 56x56x32.
pub fn append_stem_block(c: &mut Composer, input: NodeId) -> Result<NodeId> {
    let c0 = c.unit("stem.conv", input, ConvSpec::simple(3, 32, 3, 2, 1))?;
    let a1 = c.unit("stem.a.reduce", c0, ConvSpec::simple(32, 16, 1, 1, 0))?;
    let a2 = c.unit("stem.a.conv", a1, ConvSpec::simple(16, 32, 3, 2, 1))?;
    let pooled = c.pool("stem.pool", c0, pool2x2(PoolMode::Max))?;
    let cat = c.concat("stem.concat", &[a2, pooled])?;
    c.unit("stem.proj", cat, ConvSpec::simple(64, 32, 1, 1, 0))
}

/// One dense layer; the output concatenates the input with the new
/// features, so it always carries `in_channels + growth_rate` channels.
///
/// Two-way: branch a is 1x1 -> 3x3, branch b stacks a second 3x3 for a
/// larger receptive field; each emits half the growth rate. One-way is the
/// single-branch original: 1x1 -> 3x3 emitting the full growth rate.
pub fn append_dense_layer(
    c: &mut Composer,
    name: &str,
    input: NodeId,
    in_channels: usize,
    stage_index: usize,
    cfg: &PeleeConfig,
) -> Result<NodeId> {
    let bottleneck = bottleneck_channels(in_channels, cfg.growth_rate, stage_index, cfg);
    let half = cfg.growth_rate / 2;
    if cfg.two_way {
        let a1 = c.unit(
            &format!("{name}.a.bottleneck"),
            input,
            ConvSpec::simple(in_channels, bottleneck, 1, 1, 0),
        )?;
        let a2 = c.unit(
            &format!("{name}.a.conv"),
            a1,
            ConvSpec::simple(bottleneck, half, 3, 1, 1),
        )?;
        let b1 = c.unit(
            &format!("{name}.b.bottleneck"),
            input,
            ConvSpec::simple(in_channels, bottleneck, 1, 1, 0),
        )?;
        let b2 = c.unit(
            &format!("{name}.b.conv1"),
            b1,
            ConvSpec::simple(bottleneck, half, 3, 1, 1),
        )?;
        let b3 = c.unit(
            &format!("{name}.b.conv2"),
            b2,
            ConvSpec::simple(half, half, 3, 1, 1),
        )?;
        c.concat(&format!("{name}.concat"), &[input, a2, b3])
    } else {
        let b1 = c.unit(
            &format!("{name}.bottleneck"),
            input,
            ConvSpec::simple(in_channels, bottleneck, 1, 1, 0),
        )?;
        let b2 = c.unit(
            &format!("{name}.conv"),
            b1,
            ConvSpec::simple(bottleneck, cfg.growth_rate, 3, 1, 1),
        )?;
        c.concat(&format!("{name}.concat"), &[input, b2])
    }
}

/// Transition layer: 1x1 convolution to `floor(theta * in)` channels,
/// followed by a 2x2/2 average pool when `with_pool`. Returns the output
/// node and its channel count.
pub fn append_transition(
    c: &mut Composer,
    name: &str,
    input: NodeId,
    in_channels: usize,
    theta: f64,
    with_pool: bool,
) -> Result<(NodeId, usize)> {
    let out_channels = ((theta * in_channels as f64).floor() as usize).max(1);
    let conv = c.unit(
        &format!("{name}.conv"),
        input,
        ConvSpec::simple(in_channels, out_channels, 1, 1, 0),
    )?;
    let out = if with_pool {
        c.pool(&format!("{name}.pool"), conv, pool2x2(PoolMode::Avg))?
    } else {
        conv
    };
    Ok((out, out_channels))
}

pub const STEM_CHANNELS: usize = 32;

/// Full PeleeNet classifier: stem, four stages of (dense block, transition),
/// global average pool, fully connected layer, softmax. The default
/// configuration walks the channel trajectory 32 -> 128 -> 256 -> 512 -> 704
/// and contains exactly 113 convolution layers.
pub fn build_peleenet(cfg: &PeleeConfig) -> Result<Graph> {
    cfg.validate()?;
    let mut c = Composer::new(cfg.activation_order);
    let input = c.b.input("input")?;

    let mut cur = if cfg.use_stem {
        append_stem_block(&mut c, input)?
    } else {
        // plain front end: one 3x3/2 convolution plus a 2x2/2 max pool
        let conv = c.unit("stem.conv", input, ConvSpec::simple(3, STEM_CHANNELS, 3, 2, 1))?;
        c.pool("stem.pool", conv, pool2x2(PoolMode::Max))?
    };
    let mut channels = STEM_CHANNELS;

    for stage in 0..4 {
        let layers = cfg.stage_layers[stage] + if stage == 3 { cfg.extra_dense_layers } else { 0 };
        for layer in 0..layers {
            cur = append_dense_layer(
                &mut c,
                &format!("stage{}.dense{}", stage + 1, layer + 1),
                cur,
                channels,
                stage,
                cfg,
            )?;
            channels += cfg.growth_rate;
        }
        let (out, out_channels) = append_transition(
            &mut c,
            &format!("stage{}.transition", stage + 1),
            cur,
            channels,
            cfg.compression,
            stage < 3, // the last stage keeps its spatial size
        )?;
        cur = out;
        channels = out_channels;
    }

    if cfg.activation_order == ActivationOrder::Pre {
        let bn = c.b.add(
            "head.norm",
            NodeKind::BatchNorm {
                channels,
                epsilon: BN_EPSILON,
            },
            &[cur],
        )?;
        cur = c.b.add("head.norm.relu", NodeKind::Relu, &[bn])?;
    }
    let gap = c.b.add("head.gap", NodeKind::GlobalAvgPool, &[cur])?;
    let fc = c.b.add(
        "head.fc",
        NodeKind::Linear {
            in_features: channels,
            out_features: cfg.num_classes,
        },
        &[gap],
    )?;
    let softmax = c.b.add("head.softmax", NodeKind::Softmax, &[fc])?;
    c.b.build(&[softmax])
}

/// DenseNet-style baseline: 24-channel 3x3 first convolution, single-branch
/// dense layers with the fixed 4k bottleneck, compressing transitions
/// between blocks. Block layer counts are caller-supplied.
pub fn build_densenet41(
    block_layers: [usize; 4],
    growth_rate: usize,
    theta: f64,
    pre_activation: bool,
) -> Result<Graph> {
    let cfg = PeleeConfig {
        growth_rate,
        stage_layers: block_layers,
        two_way: false,
        dynamic_bottleneck: false,
        compression: theta,
        activation_order: if pre_activation {
            ActivationOrder::Pre
        } else {
            ActivationOrder::Post
        },
        ..PeleeConfig::default()
    };
    cfg.validate()?;

    let mut c = Composer::new(cfg.activation_order);
    let input = c.b.input("input")?;
    let first = ConvSpec::simple(3, 24, 3, 2, 1);
    let conv0 = if pre_activation {
        // pre-activation networks start with a bare convolution
        c.conv("stem.conv", input, first)?
    } else {
        c.unit("stem.conv", input, first)?
    };
    let mut cur = c.pool("stem.pool", conv0, pool2x2(PoolMode::Max))?;
    let mut channels = 24;

    for stage in 0..4 {
        for layer in 0..block_layers[stage] {
            cur = append_dense_layer(
                &mut c,
                &format!("stage{}.dense{}", stage + 1, layer + 1),
                cur,
                channels,
                stage,
                &cfg,
            )?;
            channels += growth_rate;
        }
        if stage < 3 {
            let (out, out_channels) = append_transition(
                &mut c,
                &format!("stage{}.transition", stage + 1),
                cur,
                channels,
                theta,
                true,
            )?;
            cur = out;
            channels = out_channels;
        }
    }

    if pre_activation {
        let bn = c.b.add(
            "head.norm",
            NodeKind::BatchNorm {
                channels,
                epsilon: BN_EPSILON,
            },
            &[cur],
        )?;
        cur = c.b.add("head.norm.relu", NodeKind::Relu, &[bn])?;
    }
    let gap = c.b.add("head.gap", NodeKind::GlobalAvgPool, &[cur])?;
    let fc = c.b.add(
        "head.fc",
        NodeKind::Linear {
            in_features: channels,
            out_features: cfg.num_classes,
        },
        &[gap],
    )?;
    let softmax = c.b.add("head.softmax", NodeKind::Softmax, &[fc])?;
    c.b.build(&[softmax])
}

/// Standard 28-layer MobileNet v1: a 3x3/2 stem convolution, thirteen
/// depthwise-separable units (3x3 grouped convolution + 1x1 pointwise, each
/// with bn + relu), global pool and classifier.
pub fn build_mobilenet_v1(width_multiplier: f64, num_classes: usize) -> Result<Graph> {
    if !(width_multiplier > 0.0) || num_classes == 0 {
        return Err(Error::Invalid(
            "width multiplier and class count must be positive".into(),
        ));
    }
    let scaled = |ch: usize| (((ch as f64) * width_multiplier).round() as usize).max(1);
    const BLOCKS: [(usize, usize); 13] = [
        (1, 64),
        (2, 128),
        (1, 128),
        (2, 256),
        (1, 256),
        (2, 512),
        (1, 512),
        (1, 512),
        (1, 512),
        (1, 512),
        (1, 512),
        (2, 1024),
        (1, 1024),
    ];

    let mut c = Composer::new(ActivationOrder::Post);
    let input = c.b.input("input")?;
    let mut channels = scaled(32);
    let mut cur = c.unit("conv0", input, ConvSpec::simple(3, channels, 3, 2, 1))?;
    for (i, (stride, out)) in BLOCKS.iter().enumerate() {
        let mut dw = ConvSpec::depthwise(channels, *stride);
        dw.pad = 1;
        cur = c.unit(&format!("sep{}.dw", i + 1), cur, dw)?;
        let out = scaled(*out);
        cur = c.unit(
            &format!("sep{}.pw", i + 1),
            cur,
            ConvSpec::simple(channels, out, 1, 1, 0),
        )?;
        channels = out;
    }
    let gap = c.b.add("head.gap", NodeKind::GlobalAvgPool, &[cur])?;
    let fc = c.b.add(
        "head.fc",
        NodeKind::Linear {
            in_features: channels,
            out_features: num_classes,
        },
        &[gap],
    )?;
    let softmax = c.b.add("head.softmax", NodeKind::Softmax, &[fc])?;
    c.b.build(&[softmax])
}

/// Cosine learning-rate annealing: `0.5 * base_lr * (cos(pi * t / total) + 1)`.
/// The schedule reaches exactly zero at the final epoch.
pub fn cosine_lr(epoch: u32, base_lr: f64, total_epochs: u32) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Invalid("total epochs must be positive".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    if epoch == total_epochs {
        // cos(pi) is -1 + ulp noise in floating point; the endpoint is zero
        return Ok(0.0);
    }
    Ok(0.5 * base_lr * ((std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos() + 1.0))
}

/// Model presets addressable by name from the command line.
pub const PRESET_NAMES: &[&str] = &[
    "peleenet",
    "peleenet-no-stem",
    "peleenet-one-way",
    "peleenet-fixed-bottleneck",
    "peleenet-compressed",
    "peleenet-preact",
    "peleenet-deep",
    "densenet41",
    "mobilenet_v1",
    "pelee-ssd",
    "pelee-ssd-3x3",
    "pelee-ssd-38x38",
];

pub fn build_preset(name: &str) -> Result<Graph> {
    let pelee = |cfg: PeleeConfig| build_peleenet(&cfg);
    match name {
        "peleenet" => pelee(PeleeConfig::default()),
        "peleenet-no-stem" => pelee(PeleeConfig {
            use_stem: false,
            ..PeleeConfig::default()
        }),
        "peleenet-one-way" => pelee(PeleeConfig {
            two_way: false,
            ..PeleeConfig::default()
        }),
        "peleenet-fixed-bottleneck" => pelee(PeleeConfig {
            dynamic_bottleneck: false,
            ..PeleeConfig::default()
        }),
        "peleenet-compressed" => pelee(PeleeConfig {
            compression: 0.5,
            ..PeleeConfig::default()
        }),
        "peleenet-preact" => pelee(PeleeConfig {
            activation_order: ActivationOrder::Pre,
            ..PeleeConfig::default()
        }),
        "peleenet-deep" => pelee(PeleeConfig {
            extra_dense_layers: 3,
            ..PeleeConfig::default()
        }),
        "densenet41" => build_densenet41([3, 4, 6, 5], 32, 0.5, true),
        "mobilenet_v1" => build_mobilenet_v1(1.0, 1000),
        "pelee-ssd" => {
            let backbone = build_peleenet(&PeleeConfig::default())?;
            detector::build_pelee_ssd(&backbone, &DetectorConfig::default())
        }
        "pelee-ssd-3x3" => {
            let backbone = build_peleenet(&PeleeConfig::default())?;
            detector::build_pelee_ssd(
                &backbone,
                &DetectorConfig {
                    head_kernel: HeadKernel::ThreeByThree,
                    ..DetectorConfig::default()
                },
            )
        }
        "pelee-ssd-38x38" => {
            let backbone = build_peleenet(&PeleeConfig::default())?;
            detector::build_pelee_ssd(
                &backbone,
                &DetectorConfig {
                    use_38x38: true,
                    use_resblock: false,
                    head_kernel: HeadKernel::ThreeByThree,
                    ..DetectorConfig::default()
                },
            )
        }
        other => Err(Error::Invalid(format!(
            "unknown model preset '{}'; available: {}",
            other,
            PRESET_NAMES.join(", ")
        ))),
    }
}

/// Cost of one dense layer under dynamic and fixed bottleneck sizing.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerSaving {
    pub layer: String,
    pub dynamic_macs: u64,
    pub fixed_macs: u64,
    /// 1 - dynamic/fixed.
    pub saving: f64,
}

/// Per-dense-layer MAC comparison between dynamic bottleneck sizing and the
/// fixed 4k convention, in network order.
pub fn dense_layer_savings(cfg: &PeleeConfig, input_hw: usize) -> Result<Vec<LayerSaving>> {
    let dims = [1, 3, input_hw, input_hw];
    let dynamic = count_flops(&build_peleenet(cfg)?, dims)?;
    let fixed_cfg = PeleeConfig {
        dynamic_bottleneck: false,
        ..cfg.clone()
    };
    let fixed = count_flops(&build_peleenet(&fixed_cfg)?, dims)?;

    let layer_macs = |report: &CostReport, prefix: &str| -> u64 {
        report
            .per_node
            .iter()
            .filter(|n| n.name.starts_with(prefix))
            .map(|n| n.macs)
            .sum()
    };

    let mut out = Vec::new();
    for stage in 0..4 {
        let layers = cfg.stage_layers[stage] + if stage == 3 { cfg.extra_dense_layers } else { 0 };
        for layer in 0..layers {
            let prefix = format!("stage{}.dense{}.", stage + 1, layer + 1);
            let d = layer_macs(&dynamic, &prefix);
            let f = layer_macs(&fixed, &prefix);
            out.push(LayerSaving {
                layer: prefix.trim_end_matches('.').to_string(),
                dynamic_macs: d,
                fixed_macs: f,
                saving: 1.0 - d as f64 / f as f64,
            });
        }
    }
    Ok(out)
}

/// Total MACs spent inside dense layers (nodes named `stage*.dense*`).
pub fn dense_block_macs(report: &CostReport) -> u64 {
    report
        .per_node
        .iter()
        .filter(|n| {
            n.name
                .split('.')
                .nth(1)
                .is_some_and(|part| part.starts_with("dense"))
        })
        .map(|n| n.macs)
        .sum()
}
