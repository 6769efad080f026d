//! Single-shot detection head on top of a PeleeNet backbone: multi-scale
//! feature selection, residual prediction blocks, small prediction kernels,
//! default-box generation, box decoding and non-maximum suppression.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cost::count_flops;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, NodeKind};
use crate::ops::ConvSpec;
use crate::tensor::Tensor;
use crate::zoo::{ActivationOrder, Composer, BN_EPSILON};

/// Kernel size of the per-map prediction convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKernel {
    #[default]
    OneByOne,
    ThreeByThree,
}

/// One default-box scale attached to a feature map, with the aspect ratios
/// instantiated at that scale.
#[derive(Debug, Clone)]
pub struct Scale {
    /// Box size in input pixels.
    pub size_px: f32,
    pub aspect_ratios: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// Spatial extent (maps are square).
    pub size: usize,
    pub scales: Vec<Scale>,
}

impl FeatureMap {
    pub fn boxes_per_cell(&self) -> usize {
        self.scales.iter().map(|s| s.aspect_ratios.len()).sum()
    }
}

const DEFAULT_RATIOS: [f32; 5] = [1.0, 2.0, 0.5, 3.0, 1.0 / 3.0];

/// Internal width of the residual prediction block.
const RES_MID_CHANNELS: usize = 128;
/// Width of the tensor entering every prediction head (residual block
/// output and shortcut projection).
const RES_OUT_CHANNELS: usize = 320;
/// Channel widths of the extra downsampling blocks: 1x1 reduce, 3x3/2 out.
const EXTRA_REDUCE_CHANNELS: usize = 128;
const EXTRA_OUT_CHANNELS: usize = 256;

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub input_size: usize,
    /// Feature maps used for prediction, largest first, excluding the
    /// optional 38x38 map (see `use_38x38`).
    pub feature_maps: Vec<FeatureMap>,
    pub head_kernel: HeadKernel,
    /// Tap the stride-8 38x38 map as an additional prediction scale.
    pub use_38x38: bool,
    /// Insert a residual block before each prediction head.
    pub use_resblock: bool,
    /// Object classes including background (class 0).
    pub num_classes: usize,
    pub variances: [f32; 4],
    pub score_threshold: f32,
    pub nms_iou_threshold: f32,
    pub top_k: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let map = |size: usize, scales: &[f32]| FeatureMap {
            size,
            scales: scales
                .iter()
                .map(|&s| Scale {
                    size_px: s,
                    aspect_ratios: DEFAULT_RATIOS.to_vec(),
                })
                .collect(),
        };
        DetectorConfig {
            input_size: 304,
            feature_maps: vec![
                map(19, &[30.4, 60.8]),
                map(10, &[112.5]),
                map(5, &[164.2]),
                map(3, &[215.8]),
                map(1, &[267.4]),
            ],
            head_kernel: HeadKernel::OneByOne,
            use_38x38: false,
            use_resblock: true,
            num_classes: 21,
            variances: [0.1, 0.1, 0.2, 0.2],
            score_threshold: 0.01,
            nms_iou_threshold: 0.45,
            top_k: 200,
        }
    }
}

impl DetectorConfig {
    /// The prediction maps in head order, including the optional 38x38 map.
    ///
    /// When enabled, the 38x38 map follows the classic SSD budget for its
    /// largest map: four boxes per cell, realized as the smallest scale with
    /// ratios {1, 2, 1/2} plus the geometric-mean scale at ratio 1.
    pub fn effective_feature_maps(&self) -> Vec<FeatureMap> {
        let mut maps = Vec::with_capacity(self.feature_maps.len() + 1);
        if self.use_38x38 {
            let s0 = 30.4f32;
            let s1 = 60.8f32;
            maps.push(FeatureMap {
                size: 38,
                scales: vec![
                    Scale {
                        size_px: s0,
                        aspect_ratios: vec![1.0, 2.0, 0.5],
                    },
                    Scale {
                        size_px: (s0 * s1).sqrt(),
                        aspect_ratios: vec![1.0],
                    },
                ],
            });
        }
        maps.extend(self.feature_maps.iter().cloned());
        maps
    }

    pub fn total_priors(&self) -> usize {
        self.effective_feature_maps()
            .iter()
            .map(|m| m.size * m.size * m.boxes_per_cell())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid(
                "detector needs at least background + one object class".into(),
            ));
        }
        if self.feature_maps.is_empty() {
            return Err(Error::Invalid("no feature maps configured".into()));
        }
        for m in &self.feature_maps {
            if m.size == 0 || m.boxes_per_cell() == 0 {
                return Err(Error::Invalid(format!(
                    "feature map {} has no cells or no boxes",
                    m.size
                )));
            }
            for s in &m.scales {
                if !(s.size_px > 0.0) || s.aspect_ratios.iter().any(|&a| !(a > 0.0)) {
                    return Err(Error::Invalid(
                        "box scales and aspect ratios must be positive".into(),
                    ));
                }
            }
        }
        if self.variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Invalid("variances must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.score_threshold)
            || !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold <= 1.0)
            || self.top_k == 0
            || self.input_size == 0
        {
            return Err(Error::Invalid("bad postprocessing thresholds".into()));
        }
        Ok(())
    }
}

/// Normalized default box, center form, clipped to the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

/// Decoded, scored, class-labeled output box in normalized corner form.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    /// (xmin, ymin, xmax, ymax).
    pub bbox: [f32; 4],
}

/// Residual prediction block: 1x1 -> 3x3 -> 1x1 main path with a 1x1
/// projection shortcut, summed and rectified. The output width is fixed
/// regardless of the input width, so prediction heads see a uniform tensor.
/// Contributes 4 convolutions.
pub fn append_res_block(
    c: &mut Composer,
    prefix: &str,
    input: NodeId,
    in_channels: usize,
) -> Result<NodeId> {
    let a1 = c.unit(
        &format!("{prefix}.a1"),
        input,
        ConvSpec::simple(in_channels, RES_MID_CHANNELS, 1, 1, 0),
    )?;
    let a2 = c.unit(
        &format!("{prefix}.a2"),
        a1,
        ConvSpec::simple(RES_MID_CHANNELS, RES_MID_CHANNELS, 3, 1, 1),
    )?;
    let a3 = conv_bn(
        c,
        &format!("{prefix}.a3"),
        a2,
        ConvSpec::simple(RES_MID_CHANNELS, RES_OUT_CHANNELS, 1, 1, 0),
    )?;
    let short = conv_bn(
        c,
        &format!("{prefix}.short"),
        input,
        ConvSpec::simple(in_channels, RES_OUT_CHANNELS, 1, 1, 0),
    )?;
    let sum = c.b.add(format!("{prefix}.add"), NodeKind::Add, &[a3, short])?;
    c.b.add(format!("{prefix}.relu"), NodeKind::Relu, &[sum])
}

/// Convolution + batch norm without the trailing relu (used on the two
/// branches feeding a residual add).
fn conv_bn(c: &mut Composer, name: &str, input: NodeId, spec: ConvSpec) -> Result<NodeId> {
    let channels = spec.out_channels;
    let conv = c.b.add(name, NodeKind::Conv(spec), &[input])?;
    c.b.add(
        format!("{name}.bn"),
        NodeKind::BatchNorm {
            channels,
            epsilon: BN_EPSILON,
        },
        &[conv],
    )
}

pub fn res_block_out_channels() -> usize {
    RES_OUT_CHANNELS
}

/// Attach the detection head network to a PeleeNet-style backbone.
///
/// The stride-8/16/32 taps are the transition-layer outputs of stages 2, 3
/// and 4 (the widest tensor at each stride, taken before the transition
/// pooling): 38x38x256, 19x19x512 and 10x10x704 at a 304 input. Extra
/// downsampling blocks (1x1 reduce + 3x3/2) continue to 5x5, 3x3 and a
/// final valid 3x3 to 1x1. Each prediction map gets a localization head
/// (4 * boxes channels) and a classification head (num_classes * boxes
/// channels); graph outputs alternate loc, conf in map order.
pub fn build_pelee_ssd(backbone: &Graph, cfg: &DetectorConfig) -> Result<Graph> {
    cfg.validate()?;
    let dims = [1, 3, cfg.input_size, cfg.input_size];
    let backbone_shapes = backbone.infer_shapes(dims)?;

    let tap = |name: &str| -> Result<(NodeId, [usize; 4])> {
        let id = backbone
            .id_of(name)
            .ok_or_else(|| Error::Graph(format!("backbone lacks tap node '{name}'")))?;
        Ok((id, backbone_shapes[id.0]))
    };
    let mut taps = Vec::new();
    if cfg.use_38x38 {
        taps.push(tap("stage2.transition.conv.relu")?);
    }
    taps.push(tap("stage3.transition.conv.relu")?);
    taps.push(tap("stage4.transition.conv.relu")?);

    // Strip everything the taps do not depend on (the classifier head).
    let tap_ids: Vec<NodeId> = taps.iter().map(|(id, _)| *id).collect();
    let (pruned, kept) = backbone.restrict_to_ancestors(&tap_ids)?;
    let mut sources: Vec<(NodeId, usize, usize)> = kept
        .iter()
        .zip(&taps)
        .map(|(id, (_, shape))| (*id, shape[1], shape[2]))
        .collect();

    let mut c = Composer::over(pruned.into_builder(), ActivationOrder::Post);

    // Extra feature maps, downsampling from the stride-32 tap.
    let (mut cur, mut cur_ch, mut cur_size) = *sources.last().expect("stride-32 tap");
    for (i, kernel_spec) in [(3usize, 2usize, 1usize), (3, 2, 1), (3, 1, 0)].iter().enumerate() {
        let (k, stride, pad) = *kernel_spec;
        let name = format!("det.ext{}", i + 1);
        let reduce = c.unit(
            &format!("{name}.reduce"),
            cur,
            ConvSpec::simple(cur_ch, EXTRA_REDUCE_CHANNELS, 1, 1, 0),
        )?;
        let spec = ConvSpec {
            in_channels: EXTRA_REDUCE_CHANNELS,
            out_channels: EXTRA_OUT_CHANNELS,
            kernel_h: k,
            kernel_w: k,
            stride,
            pad,
            groups: 1,
            has_bias: false,
        };
        let (out_size, _) = spec.output_hw(cur_size, cur_size)?;
        cur = c.unit(&format!("{name}.conv"), reduce, spec)?;
        cur_ch = EXTRA_OUT_CHANNELS;
        cur_size = out_size;
        sources.push((cur, cur_ch, cur_size));
    }

    let maps = cfg.effective_feature_maps();
    if maps.len() != sources.len() {
        return Err(Error::Graph(format!(
            "{} feature maps configured but the backbone provides {} prediction sources",
            maps.len(),
            sources.len()
        )));
    }

    let mut outputs = Vec::new();
    for (map, (source, source_ch, source_size)) in maps.iter().zip(&sources) {
        if map.size != *source_size {
            return Err(Error::Graph(format!(
                "feature map {0}x{0} does not match the {1}x{1} tensor produced at input size {2}",
                map.size, source_size, cfg.input_size
            )));
        }
        let prefix = format!("det.p{}", map.size);
        let (head_in, head_ch) = if cfg.use_resblock {
            (
                append_res_block(&mut c, &format!("{prefix}.res"), *source, *source_ch)?,
                RES_OUT_CHANNELS,
            )
        } else {
            (*source, *source_ch)
        };
        let (k, pad) = match cfg.head_kernel {
            HeadKernel::OneByOne => (1, 0),
            HeadKernel::ThreeByThree => (3, 1),
        };
        let boxes = map.boxes_per_cell();
        let loc = c.conv(
            &format!("{prefix}.loc"),
            head_in,
            ConvSpec::simple(head_ch, 4 * boxes, k, 1, pad).with_bias(),
        )?;
        let conf = c.conv(
            &format!("{prefix}.conf"),
            head_in,
            ConvSpec::simple(head_ch, cfg.num_classes * boxes, k, 1, pad).with_bias(),
        )?;
        outputs.push(loc);
        outputs.push(conf);
    }

    let graph = c.b.build(&outputs)?;
    graph.infer_shapes(dims)?; // end-to-end shape check
    Ok(graph)
}

/// Generate the default boxes for every feature map, ordered map-major,
/// then cell (row, then column), then scale, then aspect ratio. All fields
/// are clipped to [0, 1].
pub fn generate_priors(cfg: &DetectorConfig) -> Result<Vec<PriorBox>> {
    cfg.validate()?;
    let clip = |v: f32| v.clamp(0.0, 1.0);
    let mut priors = Vec::with_capacity(cfg.total_priors());
    for map in cfg.effective_feature_maps() {
        let f = map.size as f32;
        for i in 0..map.size {
            for j in 0..map.size {
                let cx = (j as f32 + 0.5) / f;
                let cy = (i as f32 + 0.5) / f;
                for scale in &map.scales {
                    let s = scale.size_px / cfg.input_size as f32;
                    for &a in &scale.aspect_ratios {
                        let r = a.sqrt();
                        priors.push(PriorBox {
                            cx: clip(cx),
                            cy: clip(cy),
                            w: clip(s * r),
                            h: clip(s / r),
                        });
                    }
                }
            }
        }
    }
    Ok(priors)
}

/// Decode regressed offsets against their priors into normalized corner
/// boxes clipped to the unit square.
///
/// cx = p.cx + l0*v0*p.w, cy = p.cy + l1*v1*p.h,
/// w = p.w*exp(l2*v2),    h = p.h*exp(l3*v3).
pub fn decode_boxes(
    loc: &[f32],
    priors: &[PriorBox],
    variances: [f32; 4],
) -> Result<Vec<[f32; 4]>> {
    if loc.len() != 4 * priors.len() {
        return Err(Error::Shape(format!(
            "{} offsets for {} priors (expected 4 per prior)",
            loc.len(),
            priors.len()
        )));
    }
    let clip = |v: f32| v.clamp(0.0, 1.0);
    Ok(priors
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let l = &loc[i * 4..i * 4 + 4];
            let cx = p.cx + l[0] * variances[0] * p.w;
            let cy = p.cy + l[1] * variances[1] * p.h;
            let w = p.w * (l[2] * variances[2]).exp();
            let h = p.h * (l[3] * variances[3]).exp();
            [
                clip(cx - w / 2.0),
                clip(cy - h / 2.0),
                clip(cx + w / 2.0),
                clip(cy + h / 2.0),
            ]
        })
        .collect())
}

pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression: visit detections in descending score
/// order (ties broken by lower original index), keep a detection unless its
/// IoU with an already kept box exceeds the threshold, stop after `top_k`.
pub fn nms(detections: &[Detection], iou_threshold: f32, top_k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept.len() == top_k {
            break;
        }
        let candidate = &detections[idx];
        if kept
            .iter()
            .all(|&k| iou(&detections[k].bbox, &candidate.bbox) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

/// Full postprocessing: per non-background class, filter by score, decode,
/// suppress; then merge classes and keep the `top_k` highest scores
/// globally. `conf` holds softmaxed class scores per prior (prior-major),
/// `loc` holds 4 offsets per prior.
pub fn postprocess(
    conf: &[f32],
    loc: &[f32],
    priors: &[PriorBox],
    cfg: &DetectorConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if conf.len() != cfg.num_classes * priors.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} priors of {} classes",
            conf.len(),
            priors.len(),
            cfg.num_classes
        )));
    }
    let boxes = decode_boxes(loc, priors, cfg.variances)?;

    // (detection, prior index) so the final ordering is deterministic
    let mut merged: Vec<(Detection, usize)> = Vec::new();
    for class in 1..cfg.num_classes {
        let mut candidates: Vec<(Detection, usize)> = Vec::new();
        for (p, bbox) in boxes.iter().enumerate() {
            let score = conf[p * cfg.num_classes + class];
            if score > cfg.score_threshold {
                candidates.push((
                    Detection {
                        class_id: class,
                        score,
                        bbox: *bbox,
                    },
                    p,
                ));
            }
        }
        let dets: Vec<Detection> = candidates.iter().map(|(d, _)| d.clone()).collect();
        let kept = nms(&dets, cfg.nms_iou_threshold, cfg.top_k);
        // map kept detections back to their prior indices (nms preserves
        // uniqueness: each kept detection is one candidate)
        for d in kept {
            let idx = candidates
                .iter()
                .position(|(c, _)| c == &d)
                .expect("kept detection came from candidates");
            merged.push((d, candidates[idx].1));
        }
    }
    merged.sort_by(|(a, pa), (b, pb)| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(pa.cmp(pb))
    });
    merged.truncate(cfg.top_k);
    Ok(merged.into_iter().map(|(d, _)| d).collect())
}

/// Flatten the per-map head outputs into the prior-major layout used by
/// [`postprocess`]: outer order is map, cell (row, column), box; loc holds
/// 4 offsets per prior and conf receives a per-prior softmax over classes.
pub fn gather_predictions(
    outputs: &BTreeMap<String, Tensor>,
    cfg: &DetectorConfig,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let maps = cfg.effective_feature_maps();
    let total = cfg.total_priors();
    let mut loc = Vec::with_capacity(4 * total);
    let mut conf = Vec::with_capacity(cfg.num_classes * total);
    for map in &maps {
        let boxes = map.boxes_per_cell();
        let get = |suffix: &str| -> Result<&Tensor> {
            let name = format!("det.p{}.{}", map.size, suffix);
            outputs
                .get(&name)
                .ok_or_else(|| Error::Graph(format!("graph outputs lack '{name}'")))
        };
        let loc_t = get("loc")?;
        let conf_t = get("conf")?;
        let expect_loc = [1, 4 * boxes, map.size, map.size];
        let expect_conf = [1, cfg.num_classes * boxes, map.size, map.size];
        if loc_t.dims() != expect_loc || conf_t.dims() != expect_conf {
            return Err(Error::Shape(format!(
                "head outputs for map {0}x{0} have dims {1:?}/{2:?}, expected {3:?}/{4:?}",
                map.size,
                loc_t.dims(),
                conf_t.dims(),
                expect_loc,
                expect_conf
            )));
        }
        for i in 0..map.size {
            for j in 0..map.size {
                for b in 0..boxes {
                    for k in 0..4 {
                        loc.push(loc_t.at(0, b * 4 + k, i, j));
                    }
                    for cl in 0..cfg.num_classes {
                        conf.push(conf_t.at(0, b * cfg.num_classes + cl, i, j));
                    }
                }
            }
        }
    }
    // stable per-prior softmax over the class axis
    for chunk in conf.chunks_mut(cfg.num_classes) {
        let m = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in chunk.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in chunk.iter_mut() {
            *v /= sum;
        }
    }
    Ok((conf, loc))
}

/// Line-oriented detection serialization: one record per detection with
/// class id, score and normalized corner coordinates, six decimal places.
pub fn format_detections(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            d.class_id, d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]
        ));
    }
    out
}

/// Cost comparison between 1x1 and 3x3 prediction kernels on otherwise
/// identical detector graphs. The saving is reported against both bases
/// because the published relative figure is ambiguous about its
/// denominator.
#[derive(Debug, Clone, Serialize)]
pub struct HeadCostComparison {
    pub total_macs_1x1: u64,
    pub total_macs_3x3: u64,
    pub head_macs_1x1: u64,
    pub head_macs_3x3: u64,
    pub delta_macs: u64,
    pub total_params_1x1: u64,
    pub total_params_3x3: u64,
    pub delta_params: u64,
    /// delta / total_3x3.
    pub saving_vs_3x3: f64,
    /// delta / total_1x1.
    pub saving_vs_1x1: f64,
}

pub fn head_cost_comparison(
    backbone: &Graph,
    cfg: &DetectorConfig,
) -> Result<HeadCostComparison> {
    let one = build_pelee_ssd(
        backbone,
        &DetectorConfig {
            head_kernel: HeadKernel::OneByOne,
            ..cfg.clone()
        },
    )?;
    let three = build_pelee_ssd(
        backbone,
        &DetectorConfig {
            head_kernel: HeadKernel::ThreeByThree,
            ..cfg.clone()
        },
    )?;
    let dims = [1, 3, cfg.input_size, cfg.input_size];
    let r1 = count_flops(&one, dims)?;
    let r3 = count_flops(&three, dims)?;
    let head_macs = |r: &crate::cost::CostReport| -> u64 {
        r.per_node
            .iter()
            .filter(|n| n.name.ends_with(".loc") || n.name.ends_with(".conf"))
            .map(|n| n.macs)
            .sum()
    };
    let delta_macs = r3.total_macs - r1.total_macs;
    Ok(HeadCostComparison {
        total_macs_1x1: r1.total_macs,
        total_macs_3x3: r3.total_macs,
        head_macs_1x1: head_macs(&r1),
        head_macs_3x3: head_macs(&r3),
        delta_macs,
        total_params_1x1: r1.total_params,
        total_params_3x3: r3.total_params,
        delta_params: r3.total_params - r1.total_params,
        saving_vs_3x3: delta_macs as f64 / r3.total_macs as f64,
        saving_vs_1x1: delta_macs as f64 / r1.total_macs as f64,
    })
}
