//! Batch-norm folding: merge every conv -> bn pair into a single biased
//! convolution. Only post-activation graphs qualify; a bn whose producer is
//! not a convolution is rejected.

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeId, NodeKind};
use crate::store::{WeightStore, WeightTensor};

/// Rewrite `graph` so no batch-norm nodes remain.
///
/// For each conv -> bn pair the convolution's weights become
/// `w' = w * gamma / sqrt(var + eps)` per output channel and its bias
/// `b' = beta + (b - mean) * gamma / sqrt(var + eps)`. Node count drops by
/// exactly the number of bn nodes; the network function is preserved.
pub fn fold_batchnorm(graph: &Graph, weights: &WeightStore) -> Result<(Graph, WeightStore)> {
    graph.check_weights(weights)?;

    let nodes = graph.nodes();
    let mut consumer_count = vec![0usize; nodes.len()];
    for node in nodes {
        for id in &node.inputs {
            consumer_count[id.0] += 1;
        }
    }

    // bn node index -> producing conv index
    let mut fused_into: Vec<Option<usize>> = vec![None; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        let NodeKind::BatchNorm { epsilon, .. } = node.kind else {
            continue;
        };
        let producer = node.inputs[0];
        let NodeKind::Conv(_) = nodes[producer.0].kind else {
            return Err(Error::Graph(format!(
                "batch-norm '{}' follows {} '{}'; folding requires a convolution producer \
                 (post-activation ordering)",
                node.name,
                nodes[producer.0].kind.label(),
                nodes[producer.0].name
            )));
        };
        if consumer_count[producer.0] != 1 || graph.outputs().contains(&producer) {
            return Err(Error::Graph(format!(
                "convolution '{}' output is used outside batch-norm '{}'; cannot fold",
                nodes[producer.0].name, node.name
            )));
        }
        fused_into[i] = Some(producer.0);
        let _ = epsilon;
    }

    let mut new_store = weights.clone();
    let mut new_specs: Vec<Option<NodeKind>> = vec![None; nodes.len()];
    for (i, fused) in fused_into.iter().enumerate() {
        let Some(conv_idx) = *fused else { continue };
        let bn = &nodes[i];
        let conv = &nodes[conv_idx];
        let NodeKind::BatchNorm { epsilon, .. } = bn.kind else {
            unreachable!()
        };
        let NodeKind::Conv(spec) = &conv.kind else {
            unreachable!()
        };

        let gamma = weights.slice(&format!("{}.gamma", bn.name))?;
        let beta = weights.slice(&format!("{}.beta", bn.name))?;
        let mean = weights.slice(&format!("{}.mean", bn.name))?;
        let var = weights.slice(&format!("{}.var", bn.name))?;
        if gamma.len() != spec.out_channels {
            return Err(Error::Shape(format!(
                "batch-norm '{}' has {} channels but convolution '{}' emits {}",
                bn.name,
                gamma.len(),
                conv.name,
                spec.out_channels
            )));
        }

        let weight_name = format!("{}.weight", conv.name);
        let bias_name = format!("{}.bias", conv.name);
        let mut w = weights.get(&weight_name).unwrap().clone();
        let old_bias: Vec<f32> = if spec.has_bias {
            weights.slice(&bias_name)?.to_vec()
        } else {
            vec![0.0; spec.out_channels]
        };

        let per_out: usize = w.shape[1..].iter().product();
        let mut new_bias = Vec::with_capacity(spec.out_channels);
        for oc in 0..spec.out_channels {
            let scale = (gamma[oc] as f64 / (var[oc] as f64 + epsilon as f64).sqrt()) as f32;
            for v in &mut w.data[oc * per_out..(oc + 1) * per_out] {
                *v *= scale;
            }
            new_bias.push(beta[oc] + (old_bias[oc] - mean[oc]) * scale);
        }
        new_store.insert(weight_name, w);
        new_store.insert(bias_name, WeightTensor::new(vec![spec.out_channels], new_bias)?);
        for suffix in ["gamma", "beta", "mean", "var"] {
            new_store.remove(&format!("{}.{}", bn.name, suffix));
        }

        let mut fused_spec = spec.clone();
        fused_spec.has_bias = true;
        new_specs[conv_idx] = Some(NodeKind::Conv(fused_spec));
    }

    // Rebuild the node list without bn nodes, rerouting their consumers to
    // the fused convolution.
    let mut forward = vec![usize::MAX; nodes.len()]; // old idx -> old idx it resolves to
    for (i, fused) in fused_into.iter().enumerate() {
        forward[i] = if fused.is_some() {
            nodes[i].inputs[0].0
        } else {
            i
        };
    }
    let mut remap = vec![usize::MAX; nodes.len()];
    let mut new_nodes: Vec<Node> = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        if fused_into[i].is_some() {
            continue;
        }
        remap[i] = new_nodes.len();
        let kind = new_specs[i].take().unwrap_or_else(|| node.kind.clone());
        let inputs = node
            .inputs
            .iter()
            .map(|id| NodeId(remap[forward[id.0]]))
            .collect();
        new_nodes.push(Node {
            name: node.name.clone(),
            kind,
            inputs,
        });
    }
    let inputs = graph
        .inputs()
        .iter()
        .map(|id| NodeId(remap[forward[id.0]]))
        .collect();
    let outputs = graph
        .outputs()
        .iter()
        .map(|id| NodeId(remap[forward[id.0]]))
        .collect();
    let folded = Graph::from_parts(new_nodes, inputs, outputs);
    folded.validate()?;
    Ok((folded, new_store))
}
