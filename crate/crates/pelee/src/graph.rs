//! Computation-graph representation.
//!
//! Graphs are immutable after construction: they are assembled through
//! [`GraphBuilder`], and every transformation pass returns a new graph.
//! Nodes are identified by dense indices and carry unique, path-style names
//! (`stage3.dense5.b.conv1`) so weight manifests are self-describing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BnParams, ConvSpec, PoolSpec};
use crate::store::WeightStore;
use crate::tensor::Tensor;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// Index of a node inside its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Operator kind plus its kind-specific attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs", rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Conv(ConvSpec),
    BatchNorm { channels: usize, epsilon: f32 },
    Relu,
    Pool(PoolSpec),
    GlobalAvgPool,
    Concat,
    Add,
    Linear { in_features: usize, out_features: usize },
    Softmax,
}

impl NodeKind {
    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv(_) => "conv",
            NodeKind::BatchNorm { .. } => "bn",
            NodeKind::Relu => "relu",
            NodeKind::Pool(_) => "pool",
            NodeKind::GlobalAvgPool => "gap",
            NodeKind::Concat => "concat",
            NodeKind::Add => "add",
            NodeKind::Linear { .. } => "linear",
            NodeKind::Softmax => "softmax",
        }
    }

    /// Accepted input arity: (min, max).
    fn arity(&self) -> (usize, usize) {
        match self {
            NodeKind::Input => (0, 0),
            NodeKind::Concat => (1, usize::MAX),
            NodeKind::Add => (2, 2),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

impl Node {
    /// Names and shapes of the weight tensors this node reads.
    pub fn weight_manifest(&self) -> Vec<(String, Vec<usize>)> {
        match &self.kind {
            NodeKind::Conv(spec) => {
                let mut v = vec![(
                    format!("{}.weight", self.name),
                    spec.weight_dims().to_vec(),
                )];
                if spec.has_bias {
                    v.push((format!("{}.bias", self.name), vec![spec.out_channels]));
                }
                v
            }
            NodeKind::BatchNorm { channels, .. } => ["gamma", "beta", "mean", "var"]
                .iter()
                .map(|suffix| (format!("{}.{}", self.name, suffix), vec![*channels]))
                .collect(),
            NodeKind::Linear {
                in_features,
                out_features,
            } => vec![
                (
                    format!("{}.weight", self.name),
                    vec![*out_features, *in_features],
                ),
                (format!("{}.bias", self.name), vec![*out_features]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Immutable computation graph.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

/// Incremental, append-only graph construction. Because a node may only
/// reference already-added nodes, built graphs are acyclic by construction
/// and stored in a valid topological order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: NodeKind, inputs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Graph(format!("duplicate node name '{name}'")));
        }
        let (lo, hi) = kind.arity();
        if inputs.len() < lo || inputs.len() > hi {
            return Err(Error::Graph(format!(
                "node '{}' ({}) given {} inputs",
                name,
                kind.label(),
                inputs.len()
            )));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!(
                    "node '{name}' references unknown input #{}",
                    id.0
                )));
            }
        }
        if let NodeKind::Conv(spec) = &kind {
            spec.validate()?;
        }
        let id = NodeId(self.nodes.len());
        self.names.insert(name.clone(), id);
        self.nodes.push(Node { name, kind, inputs: inputs.to_vec() });
        Ok(id)
    }

    pub fn input(&mut self, name: impl Into<String>) -> Result<NodeId> {
        self.add(name, NodeKind::Input, &[])
    }

    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn build(self, outputs: &[NodeId]) -> Result<Graph> {
        for id in outputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!("unknown output node #{}", id.0)));
            }
        }
        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Input))
            .map(|(i, _)| NodeId(i))
            .collect();
        let graph = Graph {
            nodes: self.nodes,
            inputs,
            outputs: outputs.to_vec(),
        };
        graph.validate()?;
        Ok(graph)
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(NodeId)
    }

    /// Number of convolution nodes.
    pub fn conv_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Conv(_)))
            .count()
    }

    /// Structural validation: unique names, sane references, arities,
    /// acyclicity.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(prev) = seen.insert(node.name.clone(), i) {
                return Err(Error::Graph(format!(
                    "node name '{}' used by #{prev} and #{i}",
                    node.name
                )));
            }
            let (lo, hi) = node.kind.arity();
            if node.inputs.len() < lo || node.inputs.len() > hi {
                return Err(Error::Graph(format!(
                    "node '{}' ({}) has {} inputs",
                    node.name,
                    node.kind.label(),
                    node.inputs.len()
                )));
            }
            for id in &node.inputs {
                if id.0 >= self.nodes.len() {
                    return Err(Error::Graph(format!(
                        "node '{}' references unknown input #{}",
                        node.name, id.0
                    )));
                }
            }
            if let NodeKind::Conv(spec) = &node.kind {
                spec.validate()?;
            }
        }
        for id in self.outputs.iter().chain(self.inputs.iter()) {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!("dangling graph input/output #{}", id.0)));
            }
        }
        self.topo_order()?;
        Ok(())
    }

    /// Kahn topological sort. Among simultaneously ready nodes the lowest
    /// id is taken first, so the result is deterministic and, for graphs
    /// coming out of [`GraphBuilder`], equals insertion order.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            indegree[i] = node.inputs.len();
            for input in &node.inputs {
                consumers[input.0].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(NodeId(i));
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            let stuck: Vec<&str> = indegree
                .iter()
                .enumerate()
                .filter(|(_, &d)| d > 0)
                .map(|(i, _)| self.nodes[i].name.as_str())
                .collect();
            return Err(Error::Graph(format!(
                "cycle detected involving: {}",
                stuck.join(", ")
            )));
        }
        Ok(order)
    }

    /// Propagate (N, C, H, W) dims from the graph input through every node.
    /// Returns per-node dims indexed by node id.
    pub fn infer_shapes(&self, input_dims: [usize; 4]) -> Result<Vec<[usize; 4]>> {
        let mut shapes = vec![[0usize; 4]; self.nodes.len()];
        for id in self.topo_order()? {
            let node = &self.nodes[id.0];
            let dims_of = |i: usize| shapes[node.inputs[i].0];
            let out = match &node.kind {
                NodeKind::Input => input_dims,
                NodeKind::Conv(spec) => {
                    let [n, c, h, w] = dims_of(0);
                    if c != spec.in_channels {
                        return Err(Error::Shape(format!(
                            "node '{}' expects {} channels, got {}",
                            node.name, spec.in_channels, c
                        )));
                    }
                    let (oh, ow) = spec.output_hw(h, w).map_err(|e| {
                        Error::Shape(format!("node '{}': {e}", node.name))
                    })?;
                    [n, spec.out_channels, oh, ow]
                }
                NodeKind::BatchNorm { channels, .. } => {
                    let d = dims_of(0);
                    if d[1] != *channels {
                        return Err(Error::Shape(format!(
                            "node '{}' normalizes {} channels, got {}",
                            node.name, channels, d[1]
                        )));
                    }
                    d
                }
                NodeKind::Relu | NodeKind::Softmax => dims_of(0),
                NodeKind::Pool(spec) => {
                    let [n, c, h, w] = dims_of(0);
                    let (oh, ow) = spec.output_hw(h, w).map_err(|e| {
                        Error::Shape(format!("node '{}': {e}", node.name))
                    })?;
                    [n, c, oh, ow]
                }
                NodeKind::GlobalAvgPool => {
                    let [n, c, _, _] = dims_of(0);
                    [n, c, 1, 1]
                }
                NodeKind::Concat => {
                    let first = dims_of(0);
                    let mut c = 0;
                    for i in 0..node.inputs.len() {
                        let d = dims_of(i);
                        if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
                            return Err(Error::Shape(format!(
                                "node '{}' concat inputs disagree: {:?} vs {:?}",
                                node.name, first, d
                            )));
                        }
                        c += d[1];
                    }
                    [first[0], c, first[2], first[3]]
                }
                NodeKind::Add => {
                    let a = dims_of(0);
                    let b = dims_of(1);
                    if a != b {
                        return Err(Error::Shape(format!(
                            "node '{}' adds mismatched dims {:?} vs {:?}",
                            node.name, a, b
                        )));
                    }
                    a
                }
                NodeKind::Linear {
                    in_features,
                    out_features,
                } => {
                    let [n, c, h, w] = dims_of(0);
                    if h != 1 || w != 1 || c != *in_features {
                        return Err(Error::Shape(format!(
                            "node '{}' expects ({in_features}, 1, 1) input, got ({c}, {h}, {w})",
                            node.name
                        )));
                    }
                    [n, *out_features, 1, 1]
                }
            };
            shapes[id.0] = out;
        }
        Ok(shapes)
    }

    /// Check that every weight the graph references exists in the store with
    /// the right shape.
    pub fn check_weights(&self, store: &WeightStore) -> Result<()> {
        for node in &self.nodes {
            for (name, shape) in node.weight_manifest() {
                let t = store
                    .get(&name)
                    .ok_or_else(|| Error::MissingWeight(name.clone()))?;
                if t.shape != shape {
                    return Err(Error::WeightShape {
                        name,
                        expected: shape,
                        actual: t.shape.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Run the graph on one input tensor. Returns the output tensors keyed
    /// by node name. Deterministic: kernels are deterministic and nodes are
    /// evaluated in topological order.
    pub fn execute(&self, store: &WeightStore, input: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        if self.inputs.len() != 1 {
            return Err(Error::Graph(format!(
                "execute expects exactly one input node, graph has {}",
                self.inputs.len()
            )));
        }
        self.check_weights(store)?;
        self.infer_shapes(input.dims())?; // validate before running kernels

        // Drop intermediate tensors after their last consumer.
        let mut remaining_uses = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for id in &node.inputs {
                remaining_uses[id.0] += 1;
            }
        }
        for id in &self.outputs {
            remaining_uses[id.0] += 1;
        }

        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut outputs = BTreeMap::new();
        for id in self.topo_order()? {
            let node = &self.nodes[id.0];
            let arg = |i: usize| values[node.inputs[i].0].as_ref().expect("topo order");
            let out = match &node.kind {
                NodeKind::Input => input.clone(),
                NodeKind::Conv(spec) => {
                    let w = store.tensor4(&format!("{}.weight", node.name))?;
                    let bias = if spec.has_bias {
                        Some(store.slice(&format!("{}.bias", node.name))?)
                    } else {
                        None
                    };
                    ops::conv2d(arg(0), &w, bias, spec)?
                }
                NodeKind::BatchNorm { epsilon, .. } => {
                    let params = BnParams {
                        gamma: store.slice(&format!("{}.gamma", node.name))?.to_vec(),
                        beta: store.slice(&format!("{}.beta", node.name))?.to_vec(),
                        running_mean: store.slice(&format!("{}.mean", node.name))?.to_vec(),
                        running_var: store.slice(&format!("{}.var", node.name))?.to_vec(),
                        epsilon: *epsilon,
                    };
                    ops::batch_norm_infer(arg(0), &params)?
                }
                NodeKind::Relu => ops::relu(arg(0)),
                NodeKind::Pool(spec) => ops::pool2d(arg(0), spec)?,
                NodeKind::GlobalAvgPool => ops::global_avg_pool(arg(0)),
                NodeKind::Concat => {
                    let tensors: Vec<&Tensor> = (0..node.inputs.len()).map(arg).collect();
                    ops::concat_channels(&tensors)?
                }
                NodeKind::Add => ops::add(arg(0), arg(1))?,
                NodeKind::Linear { .. } => {
                    let w = store.tensor4(&format!("{}.weight", node.name))?;
                    let b = store.slice(&format!("{}.bias", node.name))?;
                    ops::linear(arg(0), &w, b)?
                }
                NodeKind::Softmax => ops::softmax_channels(arg(0)),
            };
            for pid in node.inputs.clone() {
                remaining_uses[pid.0] -= 1;
                if remaining_uses[pid.0] == 0 {
                    values[pid.0] = None;
                }
            }
            if self.outputs.contains(&id) {
                outputs.insert(node.name.clone(), out.clone());
                remaining_uses[id.0] -= 1;
            }
            if remaining_uses[id.0] > 0 {
                values[id.0] = Some(out);
            }
        }
        Ok(outputs)
    }

    /// Serialize to the versioned JSON object model. Field names are part of
    /// the on-disk contract (see README). Serialization is canonical: parsing
    /// and re-serializing a document produced here is byte-identical.
    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            format_version: GRAPH_FORMAT_VERSION,
            inputs: self.inputs.iter().map(|id| self.nodes[id.0].name.clone()).collect(),
            outputs: self.outputs.iter().map(|id| self.nodes[id.0].name.clone()).collect(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    name: n.name.clone(),
                    kind: n.kind.clone(),
                    inputs: n.inputs.iter().map(|id| self.nodes[id.0].name.clone()).collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("graph serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Graph> {
        let doc: GraphDoc =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("graph json: {e}")))?;
        if doc.format_version != GRAPH_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "graph format version {} unsupported (expected {GRAPH_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let mut names = BTreeMap::new();
        for (i, n) in doc.nodes.iter().enumerate() {
            if names.insert(n.name.clone(), NodeId(i)).is_some() {
                return Err(Error::Graph(format!("duplicate node name '{}'", n.name)));
            }
        }
        let resolve = |name: &str| -> Result<NodeId> {
            names
                .get(name)
                .copied()
                .ok_or_else(|| Error::Graph(format!("reference to unknown node '{name}'")))
        };
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for n in &doc.nodes {
            let inputs = n.inputs.iter().map(|s| resolve(s)).collect::<Result<Vec<_>>>()?;
            nodes.push(Node { name: n.name.clone(), kind: n.kind.clone(), inputs });
        }
        let graph = Graph {
            nodes,
            inputs: doc.inputs.iter().map(|s| resolve(s)).collect::<Result<Vec<_>>>()?,
            outputs: doc.outputs.iter().map(|s| resolve(s)).collect::<Result<Vec<_>>>()?,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// New graph containing only the ancestors of `keep` (plus `keep`
    /// itself), with identical names and attributes. Used to strip a
    /// classifier head off a backbone before attaching a detector.
    pub fn restrict_to_ancestors(&self, keep: &[NodeId]) -> Result<(Graph, Vec<NodeId>)> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = keep.iter().map(|id| id.0).collect();
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            stack.extend(self.nodes[i].inputs.iter().map(|id| id.0));
        }
        let order = self.topo_order()?;
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for id in order {
            if !needed[id.0] {
                continue;
            }
            let src = &self.nodes[id.0];
            remap[id.0] = nodes.len();
            nodes.push(Node {
                name: src.name.clone(),
                kind: src.kind.clone(),
                inputs: src.inputs.iter().map(|p| NodeId(remap[p.0])).collect(),
            });
        }
        let inputs = self
            .inputs
            .iter()
            .filter(|id| needed[id.0])
            .map(|id| NodeId(remap[id.0]))
            .collect();
        let kept = keep.iter().map(|id| NodeId(remap[id.0])).collect();
        Ok((
            Graph {
                nodes,
                inputs,
                outputs: Vec::new(),
            },
            kept,
        ))
    }

    /// Continue building on top of this graph. Outputs must be re-declared.
    pub fn into_builder(self) -> GraphBuilder {
        let names = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.clone(), NodeId(i)))
            .collect();
        GraphBuilder { nodes: self.nodes, names }
    }

    pub(crate) fn from_parts(nodes: Vec<Node>, inputs: Vec<NodeId>, outputs: Vec<NodeId>) -> Graph {
        Graph { nodes, inputs, outputs }
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    format_version: u32,
    inputs: Vec<String>,
    outputs: Vec<String>,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    name: String,
    #[serde(flatten)]
    kind: NodeKind,
    inputs: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::WeightStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain_graph() -> Graph {
        let mut b = GraphBuilder::new();
        let input = b.input("input").unwrap();
        let conv = b
            .add("conv", NodeKind::Conv(ConvSpec::simple(3, 4, 3, 2, 1)), &[input])
            .unwrap();
        let bn = b
            .add("conv.bn", NodeKind::BatchNorm { channels: 4, epsilon: 1e-5 }, &[conv])
            .unwrap();
        let relu = b.add("conv.relu", NodeKind::Relu, &[bn]).unwrap();
        b.build(&[relu]).unwrap()
    }

    #[test]
    fn builder_rejects_duplicates_and_bad_refs() {
        let mut b = GraphBuilder::new();
        let input = b.input("x").unwrap();
        assert!(b.input("x").is_err());
        assert!(b.add("y", NodeKind::Relu, &[NodeId(99)]).is_err());
        assert!(b.add("y", NodeKind::Add, &[input]).is_err()); // arity
    }

    #[test]
    fn topo_linear_chain_and_diamond() {
        let g = chain_graph();
        let order: Vec<usize> = g.topo_order().unwrap().iter().map(|id| id.0).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);

        let mut b = GraphBuilder::new();
        let a = b.input("a").unwrap();
        let l = b.add("left", NodeKind::Relu, &[a]).unwrap();
        let r = b.add("right", NodeKind::Relu, &[a]).unwrap();
        let d = b.add("join", NodeKind::Add, &[l, r]).unwrap();
        let g = b.build(&[d]).unwrap();
        let order = g.topo_order().unwrap();
        assert_eq!(order.first(), Some(&a));
        assert_eq!(order.last(), Some(&d));
    }

    #[test]
    fn topo_on_random_dags_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..25 {
            let n = rng.random_range(3..20);
            let mut b = GraphBuilder::new();
            let mut ids = vec![b.input("n0").unwrap()];
            for i in 1..n {
                let lo = rng.random_range(0..i);
                ids.push(
                    b.add(format!("n{i}"), NodeKind::Relu, &[ids[lo]]).unwrap(),
                );
            }
            let g = b.build(&[*ids.last().unwrap()]).unwrap();
            let order = g.topo_order().unwrap();
            // edge-scan validation: every producer precedes its consumers
            let mut pos = vec![0usize; g.len()];
            for (p, id) in order.iter().enumerate() {
                pos[id.0] = p;
            }
            for node_id in 0..g.len() {
                for input in &g.node(NodeId(node_id)).inputs {
                    assert!(pos[input.0] < pos[node_id]);
                }
            }
            assert_eq!(order.len(), g.len());
        }
    }

    #[test]
    fn cycles_are_rejected() {
        // construct a cyclic document by hand; the builder cannot make one
        let text = r#"{
  "format_version": 1,
  "inputs": [],
  "outputs": ["a"],
  "nodes": [
    { "name": "a", "kind": "relu", "inputs": ["b"] },
    { "name": "b", "kind": "relu", "inputs": ["a"] }
  ]
}"#;
        let err = Graph::from_json(text).unwrap_err();
        assert!(err.to_string().contains("cycle"));
    }

    #[test]
    fn infer_shapes_single_conv() {
        let g = chain_graph();
        let shapes = g.infer_shapes([1, 3, 224, 224]).unwrap();
        assert_eq!(shapes[1], [1, 4, 112, 112]);
        assert_eq!(shapes[3], [1, 4, 112, 112]);
        // channel mismatch is a shape error
        assert!(g.infer_shapes([1, 2, 224, 224]).is_err());
    }

    #[test]
    fn execute_single_relu() {
        let mut b = GraphBuilder::new();
        let input = b.input("input").unwrap();
        let r = b.add("r", NodeKind::Relu, &[input]).unwrap();
        let g = b.build(&[r]).unwrap();
        let t = Tensor::new([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let out = g.execute(&WeightStore::new(), &t).unwrap();
        assert_eq!(out["r"].data(), &[0.0, 2.0]);
    }

    #[test]
    fn execute_conv_bn_relu_matches_manual_composition() {
        let g = chain_graph();
        let store = WeightStore::random_for(&g, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::new(
            [1, 3, 8, 8],
            (0..192).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let got = g.execute(&store, &input).unwrap();

        let spec = ConvSpec::simple(3, 4, 3, 2, 1);
        let w = store.tensor4("conv.weight").unwrap();
        let conv = ops::conv2d(&input, &w, None, &spec).unwrap();
        let params = BnParams {
            gamma: store.slice("conv.bn.gamma").unwrap().to_vec(),
            beta: store.slice("conv.bn.beta").unwrap().to_vec(),
            running_mean: store.slice("conv.bn.mean").unwrap().to_vec(),
            running_var: store.slice("conv.bn.var").unwrap().to_vec(),
            epsilon: 1e-5,
        };
        let want = ops::relu(&ops::batch_norm_infer(&conv, &params).unwrap());
        assert_eq!(got["conv.relu"], want);
    }

    #[test]
    fn execute_reports_missing_weight() {
        let g = chain_graph();
        let t = Tensor::zeros([1, 3, 8, 8]);
        let err = g.execute(&WeightStore::new(), &t).unwrap_err();
        assert!(matches!(err, Error::MissingWeight(_)));
        assert!(err.to_string().contains("conv"));
    }

    #[test]
    fn execute_is_deterministic() {
        let g = chain_graph();
        let store = WeightStore::random_for(&g, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::new(
            [1, 3, 16, 16],
            (0..768).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let a = g.execute(&store, &input).unwrap();
        let b = g.execute(&store, &input).unwrap();
        assert_eq!(a["conv.relu"].data(), b["conv.relu"].data());
    }

    #[test]
    fn json_roundtrip_is_byte_identical() {
        let g = chain_graph();
        let first = g.to_json();
        let parsed = Graph::from_json(&first).unwrap();
        let second = parsed.to_json();
        assert_eq!(first, second);
    }
}
