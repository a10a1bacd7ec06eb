//! Network DAGs: construction of the deeply supervised trunk, the shortcut
//! rewrite, shape inference and execution.
//!
//! A [`NetworkGraph`] is pure structure and serializes to the JSON
//! architecture file. Parameters live next to it in a [`Network`], which can
//! only be built from a graph whose shapes check out.

mod build;
mod exec;
mod rewrite;
mod shapes;

pub use build::{build_cnds, build_conv_stack, ArchConfig, ConvStackConfig, PoolGeometry};
pub use exec::{ForwardPass, HeadGrads, Init, Network, ParamMap};
pub use rewrite::{insert_residual_connections, ResidualOptions};
pub use shapes::{infer_shapes, ShapeMap};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Which branch a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchTag {
    Main,
    Auxiliary(usize),
}

impl BranchTag {
    pub fn is_main(self) -> bool {
        self == BranchTag::Main
    }
}

/// Layer kind plus its geometry.
///
/// ReLU is folded into conv, fc and add nodes through the `relu` flag; fc
/// nodes apply dropout after the activation when `dropout > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Fc {
        out_features: usize,
        relu: bool,
        dropout: f64,
    },
    /// Element-wise sum of exactly two inputs.
    Add {
        relu: bool,
    },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub branch: BranchTag,
}

/// A classifier head: the node producing logits and the branch it closes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub node: String,
    pub branch: BranchTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    /// Per-sample input geometry `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub nodes: Vec<LayerNode>,
    pub heads: Vec<Head>,
}

impl NetworkGraph {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: NetworkGraph = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization cannot fail")
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub(crate) fn node_mut(&mut self, id: &str) -> Option<&mut LayerNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn main_head(&self) -> &Head {
        self.heads
            .iter()
            .find(|h| h.branch.is_main())
            .expect("validated graph has a main head")
    }

    pub fn aux_heads(&self) -> impl Iterator<Item = &Head> {
        self.heads.iter().filter(|h| !h.branch.is_main())
    }

    pub fn has_aux(&self) -> bool {
        self.nodes.iter().any(|n| !n.branch.is_main())
    }

    /// Main-branch node each auxiliary branch reads from.
    pub fn aux_attach_points(&self) -> BTreeMap<BranchTag, String> {
        let mut out = BTreeMap::new();
        for n in self.nodes.iter().filter(|n| !n.branch.is_main()) {
            for i in &n.inputs {
                if self.node(i).is_some_and(|src| src.branch.is_main()) {
                    out.insert(n.branch, i.clone());
                }
            }
        }
        out
    }

    /// Ids of trainable nodes on `branch`, in topological order.
    pub fn param_nodes(&self, branch: BranchTag) -> Vec<&str> {
        self.topo_order()
            .expect("validated graph is acyclic")
            .into_iter()
            .map(|i| &self.nodes[i])
            .filter(|n| n.branch == branch && n.kind.has_params())
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Kahn's algorithm; ready nodes are taken in declaration order so the
    /// result is deterministic.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut edges: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                let Some(&src) = index.get(inp.as_str()) else {
                    bail!(Config, "node {} reads unknown node {inp}", n.id);
                };
                edges[src].push(i);
                indegree[i] += 1;
            }
        }
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &edges[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() != self.nodes.len() {
            bail!(Config, "graph contains a cycle");
        }
        Ok(order)
    }

    /// Structural checks: unique ids, known inputs, arity, acyclicity, one
    /// input node, one head per branch, and no main node reading an
    /// auxiliary one.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if self.input_shape.contains(&0) {
            bail!(Config, "input shape {:?} has a zero extent", self.input_shape);
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                bail!(Config, "duplicate node id {}", n.id);
            }
        }
        let mut inputs = 0;
        for n in &self.nodes {
            if n.inputs.len() != n.kind.arity() {
                bail!(
                    Config,
                    "node {} takes {} inputs, has {}",
                    n.id,
                    n.kind.arity(),
                    n.inputs.len()
                );
            }
            if n.kind == LayerKind::Input {
                inputs += 1;
                if n.branch != BranchTag::Main {
                    bail!(Config, "input node {} must be on the main branch", n.id);
                }
            }
            for i in &n.inputs {
                let Some(src) = self.node(i) else {
                    bail!(Config, "node {} reads unknown node {i}", n.id);
                };
                if n.branch.is_main() && !src.branch.is_main() {
                    bail!(Config, "main node {} reads auxiliary node {i}", n.id);
                }
                if !n.branch.is_main() && !src.branch.is_main() && src.branch != n.branch {
                    bail!(Config, "node {} mixes auxiliary branches", n.id);
                }
            }
            match &n.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } if *out_channels == 0 || *kernel == 0 || *stride == 0 => {
                    bail!(Config, "conv {} has a zero geometry field", n.id)
                }
                LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride }
                    if *kernel == 0 || *stride == 0 =>
                {
                    bail!(Config, "pool {} has a zero geometry field", n.id)
                }
                LayerKind::Fc {
                    out_features,
                    dropout,
                    ..
                } if *out_features == 0 || !(0.0..1.0).contains(dropout) => {
                    bail!(Config, "fc {} has invalid width or dropout rate", n.id)
                }
                _ => {}
            }
        }
        if inputs != 1 {
            bail!(Config, "graph needs exactly one input node, has {inputs}");
        }
        self.topo_order()?;

        let mains = self.heads.iter().filter(|h| h.branch.is_main()).count();
        if mains != 1 {
            bail!(Config, "graph needs exactly one main head, has {mains}");
        }
        let mut head_branches = BTreeSet::new();
        for h in &self.heads {
            if !head_branches.insert(h.branch) {
                bail!(Config, "branch {:?} has more than one head", h.branch);
            }
            let Some(node) = self.node(&h.node) else {
                bail!(Config, "head {} is not a node", h.node);
            };
            if node.branch != h.branch {
                bail!(Config, "head {} is tagged {:?} but its node is {:?}", h.node, h.branch, node.branch);
            }
            match node.kind {
                LayerKind::Fc { out_features, .. } if out_features == self.num_classes => {}
                _ => bail!(
                    Config,
                    "head {} must be an fc layer with {} outputs",
                    h.node,
                    self.num_classes
                ),
            }
        }
        for n in &self.nodes {
            if !head_branches.contains(&n.branch) {
                bail!(Config, "branch of node {} has no head", n.id);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkGraph {
        build_cnds(&ArchConfig::desk(3)).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let g = tiny();
        let back = NetworkGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rejects_cycles_and_unknown_inputs() {
        let mut g = tiny();
        g.node_mut("conv2").unwrap().inputs = vec!["conv3_1".into()];
        assert!(g.validate().is_err());

        let mut g = tiny();
        g.node_mut("conv2").unwrap().inputs = vec!["nope".into()];
        assert!(g.validate().is_err());
    }

    #[test]
    fn rejects_duplicate_and_headless_branches() {
        let mut g = tiny();
        g.nodes[2].id = "conv1".into();
        assert!(g.validate().is_err());

        let mut g = tiny();
        g.heads.retain(|h| h.branch.is_main());
        assert!(g.validate().is_err());
    }

    #[test]
    fn main_nodes_cannot_read_aux_nodes() {
        let mut g = tiny();
        g.node_mut("fc6").unwrap().inputs = vec!["s_conv".into()];
        assert!(g.validate().is_err());
    }
}
