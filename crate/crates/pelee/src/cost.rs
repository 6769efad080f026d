//! Static cost model: multiply-accumulate counts and parameter counts per
//! node, with totals and a printable summary table.
//!
//! The FLOPs convention is MAC-only: convolutions contribute
//! `Ho*Wo*Cout*(Cin/groups)*Kh*Kw`, fully connected layers `Cin*Cout`, and
//! everything else (bn, relu, pooling, concat, add, softmax) contributes
//! zero. Batch-norm parameters are split into learned (gamma, beta) and
//! running statistics (mean, var); `params_total` includes both.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, NodeKind};

#[derive(Debug, Clone, Serialize)]
pub struct NodeCost {
    pub name: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_shape: Option<[usize; 4]>,
    pub macs: u64,
    pub params_learned: u64,
    pub params_total: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub per_node: Vec<NodeCost>,
    pub total_macs: u64,
    pub total_params_learned: u64,
    pub total_params: u64,
    pub conv_layer_count: usize,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

fn node_params(kind: &NodeKind) -> (u64, u64) {
    match kind {
        NodeKind::Conv(spec) => {
            let p = spec.param_count();
            (p, p)
        }
        NodeKind::BatchNorm { channels, .. } => {
            let c = *channels as u64;
            (2 * c, 4 * c) // gamma+beta learned; mean+var are running stats
        }
        NodeKind::Linear {
            in_features,
            out_features,
        } => {
            let p = (*in_features as u64) * (*out_features as u64) + *out_features as u64;
            (p, p)
        }
        _ => (0, 0),
    }
}

fn build_report(graph: &Graph, shapes: Option<&[[usize; 4]]>) -> CostReport {
    let mut per_node = Vec::with_capacity(graph.len());
    let mut total_macs = 0u64;
    let mut total_learned = 0u64;
    let mut total_params = 0u64;
    for (i, node) in graph.nodes().iter().enumerate() {
        let macs = match (&node.kind, shapes) {
            (NodeKind::Conv(spec), Some(shapes)) => {
                let in_dims = shapes[node.inputs[0].0];
                in_dims[0] as u64 * spec.macs(in_dims[2], in_dims[3]).expect("shapes inferred")
            }
            (NodeKind::Linear { in_features, out_features }, Some(shapes)) => {
                let n = shapes[node.inputs[0].0][0] as u64;
                n * (*in_features as u64) * (*out_features as u64)
            }
            _ => 0,
        };
        let (learned, total) = node_params(&node.kind);
        total_macs += macs;
        total_learned += learned;
        total_params += total;
        per_node.push(NodeCost {
            name: node.name.clone(),
            kind: node.kind.label().to_string(),
            output_shape: shapes.map(|s| s[i]),
            macs,
            params_learned: learned,
            params_total: total,
        });
    }
    CostReport {
        per_node,
        total_macs,
        total_params_learned: total_learned,
        total_params,
        conv_layer_count: graph.conv_layer_count(),
    }
}

/// Per-node and total multiply-accumulate counts at the given input dims.
/// Parameter counts are filled in as well, since they come for free.
pub fn count_flops(graph: &Graph, input_dims: [usize; 4]) -> Result<CostReport> {
    if graph.is_empty() {
        return Ok(build_report(graph, None));
    }
    let shapes = graph.infer_shapes(input_dims)?;
    Ok(build_report(graph, Some(&shapes)))
}

/// Parameter counts only; needs no input dims, so output shapes and MACs are
/// absent from the report.
pub fn count_params(graph: &Graph) -> CostReport {
    build_report(graph, None)
}

/// Human-readable table: one row per node, footer with totals and the
/// convolution-layer count.
pub fn summarize(graph: &Graph, input_dims: [usize; 4]) -> Result<String> {
    let report = count_flops(graph, input_dims)?;
    let mut width = "node".len();
    for n in &report.per_node {
        width = width.max(n.name.len());
    }
    let mut out = String::new();
    out.push_str(&format!(
        "{:<width$}  {:<7} {:<18} {:>12} {:>14}\n",
        "node", "kind", "output", "params", "macs"
    ));
    for n in &report.per_node {
        let shape = n
            .output_shape
            .map(|[b, c, h, w]| format!("{b}x{c}x{h}x{w}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{:<width$}  {:<7} {:<18} {:>12} {:>14}\n",
            n.name, n.kind, shape, n.params_total, n.macs
        ));
    }
    out.push_str(&format!(
        "total: {} macs, {} params ({} learned + {} running stats), {} conv layers\n",
        report.total_macs,
        report.total_params,
        report.total_params_learned,
        report.total_params - report.total_params_learned,
        report.conv_layer_count
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, GraphBuilder, NodeKind};
    use crate::ops::ConvSpec;

    #[test]
    fn conv_mac_formula_hand_checked() {
        let mut b = GraphBuilder::new();
        let input = b.input("input").unwrap();
        let conv = b
            .add("c", NodeKind::Conv(ConvSpec::simple(3, 32, 3, 2, 1)), &[input])
            .unwrap();
        let g = b.build(&[conv]).unwrap();
        let r = count_flops(&g, [1, 3, 224, 224]).unwrap();
        // 112 * 112 * 32 * 3 * 3 * 3
        assert_eq!(r.total_macs, 10_838_016);
        assert_eq!(r.conv_layer_count, 1);
        // 32 * 3 * 9 weights, no bias
        assert_eq!(r.total_params, 864);
    }

    #[test]
    fn linear_macs_and_params() {
        let mut b = GraphBuilder::new();
        let input = b.input("input").unwrap();
        let gap = b.add("gap", NodeKind::GlobalAvgPool, &[input]).unwrap();
        let fc = b
            .add(
                "fc",
                NodeKind::Linear { in_features: 704, out_features: 1000 },
                &[gap],
            )
            .unwrap();
        let g = b.build(&[fc]).unwrap();
        let r = count_flops(&g, [1, 704, 7, 7]).unwrap();
        assert_eq!(r.total_macs, 704_000);
        assert_eq!(r.total_params, 704 * 1000 + 1000);
    }

    #[test]
    fn totals_are_sums_of_per_node_entries() {
        let mut b = GraphBuilder::new();
        let input = b.input("input").unwrap();
        let c1 = b
            .add("c1", NodeKind::Conv(ConvSpec::simple(3, 8, 3, 1, 1)), &[input])
            .unwrap();
        let bn = b
            .add("c1.bn", NodeKind::BatchNorm { channels: 8, epsilon: 1e-5 }, &[c1])
            .unwrap();
        let relu = b.add("c1.relu", NodeKind::Relu, &[bn]).unwrap();
        let c2 = b
            .add("c2", NodeKind::Conv(ConvSpec::simple(8, 4, 1, 1, 0).with_bias()), &[relu])
            .unwrap();
        let g = b.build(&[c2]).unwrap();
        let r = count_flops(&g, [1, 3, 16, 16]).unwrap();
        assert_eq!(r.total_macs, r.per_node.iter().map(|n| n.macs).sum::<u64>());
        assert_eq!(
            r.total_params,
            r.per_node.iter().map(|n| n.params_total).sum::<u64>()
        );
        assert_eq!(
            r.total_params_learned,
            r.per_node.iter().map(|n| n.params_learned).sum::<u64>()
        );
        // bn running stats are flagged separately
        assert_eq!(r.total_params - r.total_params_learned, 16);

        // params-only report agrees and carries no shapes
        let p = count_params(&g);
        assert_eq!(p.total_params, r.total_params);
        assert!(p.per_node.iter().all(|n| n.output_shape.is_none()));
    }

    #[test]
    fn summary_of_empty_graph_is_header_only() {
        let g = Graph::from_parts(Vec::new(), Vec::new(), Vec::new());
        let s = summarize(&g, [1, 3, 8, 8]).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 2); // header + footer
        assert!(lines[1].contains("0 conv layers"));
    }
}
