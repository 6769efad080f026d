//! Independent reference implementations shared by the integration tests.
//! These deliberately do not reuse the library's fast paths.
#![allow(dead_code)] // each test binary uses a different subset

use pelee::detector::{iou, Detection, PriorBox};
use pelee::ops::ConvSpec;
use pelee::tensor::Tensor;

/// Direct 7-loop convolution oracle; accumulates channel-major, then kernel
/// row, then kernel column.
pub fn conv2d_naive(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> Tensor {
    let [n, _, h, w] = input.dims();
    let (out_h, out_w) = spec.output_hw(h, w).unwrap();
    let c_pg = spec.in_channels / spec.groups;
    let o_pg = spec.out_channels / spec.groups;
    let mut out = Tensor::zeros([n, spec.out_channels, out_h, out_w]);
    for img in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / o_pg;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = 0.0f32;
                    for cl in 0..c_pg {
                        for kh in 0..spec.kernel_h {
                            for kw in 0..spec.kernel_w {
                                let ih = oh * spec.stride + kh;
                                let iw = ow * spec.stride + kw;
                                if ih < spec.pad
                                    || iw < spec.pad
                                    || ih >= h + spec.pad
                                    || iw >= w + spec.pad
                                {
                                    continue;
                                }
                                acc += input.at(img, g * c_pg + cl, ih - spec.pad, iw - spec.pad)
                                    * weights.at(oc, cl, kh, kw);
                            }
                        }
                    }
                    out.set(img, oc, oh, ow, acc + bias.map_or(0.0, |b| b[oc]));
                }
            }
        }
    }
    out
}

/// Inverse of the box decoding, used only to test the round trip. The box
/// is given in corner form with positive extents.
pub fn encode_box(bbox: [f32; 4], prior: &PriorBox, variances: [f32; 4]) -> [f32; 4] {
    let cx = (bbox[0] + bbox[2]) / 2.0;
    let cy = (bbox[1] + bbox[3]) / 2.0;
    let w = bbox[2] - bbox[0];
    let h = bbox[3] - bbox[1];
    [
        (cx - prior.cx) / (variances[0] * prior.w),
        (cy - prior.cy) / (variances[1] * prior.h),
        (w / prior.w).ln() / variances[2],
        (h / prior.h).ln() / variances[3],
    ]
}

/// Quadratic reference suppression: repeatedly take the highest-scored
/// surviving detection (earliest index on ties) and drop everything it
/// overlaps past the threshold.
pub fn nms_bruteforce(dets: &[Detection], thresh: f32, top_k: usize) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    while out.len() < top_k {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) if dets[i].score > dets[j].score => Some(i),
                keep => keep,
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b].clone());
        for i in 0..dets.len() {
            if alive[i] && iou(&dets[b].bbox, &dets[i].bbox) > thresh {
                alive[i] = false;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
