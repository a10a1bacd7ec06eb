use std::collections::{BTreeMap, HashMap};

use super::{infer_shapes, BranchTag, LayerKind, NetworkGraph, ShapeMap};
use crate::error::{bail, Result};
use crate::layers::{
    avgpool_backward, avgpool_forward, conv2d_backward, conv2d_forward, dropout_backward,
    dropout_forward, fc_backward, fc_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, LayerCache, LayerParams, Mode,
};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Parameters (or parameter gradients) keyed by node id.
pub type ParamMap = BTreeMap<String, LayerParams>;

/// Loss gradients w.r.t. head logits, keyed by head node id. A missing head
/// contributes nothing.
pub type HeadGrads = BTreeMap<String, Tensor>;

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian weights with a fixed std, zero biases.
    Gaussian { std: f64 },
    /// Gaussian weights with std `sqrt(2 / fan_in)` and Gaussian biases with
    /// std `bias_std`. Used where well-scaled activations matter more than
    /// fidelity to the training recipe (finite-difference checks).
    He { bias_std: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Init::Gaussian { std: 0.01 }
    }
}

/// A shape-checked graph together with its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    graph: NetworkGraph,
    shapes: ShapeMap,
    order: Vec<usize>,
    index: HashMap<String, usize>,
    params: ParamMap,
}

#[derive(Debug, Default)]
struct NodeCache {
    layer: LayerCache,
    relu: LayerCache,
    dropout: LayerCache,
}

/// Everything a forward run leaves behind: per-node outputs, the head
/// logits, and the caches the backward pass consumes.
#[derive(Debug)]
pub struct ForwardPass {
    mode: Mode,
    batch: usize,
    outputs: Vec<Option<Tensor>>,
    caches: Vec<NodeCache>,
    logits: BTreeMap<String, Tensor>,
    consumed: bool,
}

impl ForwardPass {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Logits of every executed head, keyed by head node id.
    pub fn logits(&self) -> &BTreeMap<String, Tensor> {
        &self.logits
    }

    pub fn head(&self, id: &str) -> Option<&Tensor> {
        self.logits.get(id)
    }

    pub fn into_logits(self) -> BTreeMap<String, Tensor> {
        self.logits
    }
}

fn param_shapes(kind: &LayerKind, input: &[usize]) -> Option<(Vec<usize>, usize)> {
    match *kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            ..
        } => Some((vec![out_channels, input[0], kernel, kernel], input[0] * kernel * kernel)),
        LayerKind::Fc { out_features, .. } => {
            let d: usize = input.iter().product();
            Some((vec![out_features, d], d))
        }
        _ => None,
    }
}

impl Network {
    /// Checks structure, shapes and that `params` holds exactly one correctly
    /// shaped entry per trainable node.
    pub fn new(graph: NetworkGraph, params: ParamMap) -> Result<Self> {
        graph.validate()?;
        let shapes = infer_shapes(&graph, graph.input_shape)?;
        let order = graph.topo_order()?;
        let index = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let mut expected = 0;
        for n in &graph.nodes {
            let input = n.inputs.first().map(|i| shapes[i].as_slice()).unwrap_or(&[]);
            if let Some((w_shape, _)) = param_shapes(&n.kind, input) {
                expected += 1;
                let Some(p) = params.get(&n.id) else {
                    bail!(Config, "no parameters for node {}", n.id);
                };
                if p.weights.shape() != w_shape.as_slice() || p.bias.shape() != [w_shape[0]] {
                    bail!(
                        Shape,
                        "parameters of {} are {:?}/{:?}, expected {w_shape:?}/[{}]",
                        n.id,
                        p.weights.shape(),
                        p.bias.shape(),
                        w_shape[0]
                    );
                }
            }
        }
        if params.len() != expected {
            bail!(Config, "parameter map has entries for nodes not in the graph");
        }
        Ok(Network {
            graph,
            shapes,
            order,
            index,
            params,
        })
    }

    /// Fresh parameters; each node draws from its own stream derived from
    /// `seed` and the node id.
    pub fn init(graph: NetworkGraph, init: Init, seed: u64) -> Result<Self> {
        graph.validate()?;
        let shapes = infer_shapes(&graph, graph.input_shape)?;
        let mut params = ParamMap::new();
        for n in &graph.nodes {
            let input = n.inputs.first().map(|i| shapes[i].as_slice()).unwrap_or(&[]);
            let Some((w_shape, fan_in)) = param_shapes(&n.kind, input) else {
                continue;
            };
            let o = w_shape[0];
            let (std, bias_std) = match init {
                Init::Gaussian { std } => (std, 0.0),
                Init::He { bias_std } => ((2.0 / fan_in as f64).sqrt(), bias_std),
            };
            let weights = Tensor::gaussian(&w_shape, std, derive_seed(seed, &format!("init/{}/w", n.id)))?;
            let bias = if bias_std > 0.0 {
                Tensor::gaussian(&[o], bias_std, derive_seed(seed, &format!("init/{}/b", n.id)))?
            } else {
                Tensor::zeros(&[o])?
            };
            params.insert(n.id.clone(), LayerParams::new(weights, bias)?);
        }
        Network::new(graph, params)
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn shapes(&self) -> &ShapeMap {
        &self.shapes
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Mutable access to parameter values; shapes must not change.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut LayerParams)> {
        self.params.iter_mut()
    }

    pub fn param_mut(&mut self, id: &str) -> Option<&mut LayerParams> {
        self.params.get_mut(id)
    }

    pub fn into_parts(self) -> (NetworkGraph, ParamMap) {
        (self.graph, self.params)
    }

    /// Runs the graph in topological order. Test mode skips auxiliary
    /// branches and makes dropout the identity. Dropout masks are seeded per
    /// node from `seed`.
    pub fn forward(&self, batch: &Tensor, mode: Mode, seed: u64) -> Result<ForwardPass> {
        let n = batch.shape().first().copied().unwrap_or(0);
        let mut expected = vec![n];
        expected.extend_from_slice(&self.graph.input_shape);
        if batch.shape() != expected.as_slice() || n == 0 {
            bail!(
                Shape,
                "batch shape {:?} does not match network input [N, {:?}]",
                batch.shape(),
                self.graph.input_shape
            );
        }
        let count = self.graph.nodes.len();
        let mut outputs: Vec<Option<Tensor>> = vec![None; count];
        let mut caches: Vec<NodeCache> = (0..count).map(|_| NodeCache::default()).collect();

        for &i in &self.order {
            let node = &self.graph.nodes[i];
            if mode == Mode::Test && !node.branch.is_main() {
                continue;
            }
            let input = |k: usize| -> &Tensor {
                outputs[self.index[&node.inputs[k]]]
                    .as_ref()
                    .expect("topological order runs inputs first")
            };
            let cache = &mut caches[i];
            let out = match &node.kind {
                LayerKind::Input => batch.clone(),
                LayerKind::Conv {
                    stride, pad, relu, ..
                } => {
                    let y = conv2d_forward(input(0), &self.params[&node.id], *stride, *pad, &mut cache.layer)?;
                    if *relu {
                        relu_forward(&y, &mut cache.relu)?
                    } else {
                        y
                    }
                }
                LayerKind::MaxPool { kernel, stride } => maxpool_forward(input(0), *kernel, *stride, &mut cache.layer)?,
                LayerKind::AvgPool { kernel, stride } => avgpool_forward(input(0), *kernel, *stride, &mut cache.layer)?,
                LayerKind::Fc { relu, dropout, .. } => {
                    let mut y = fc_forward(input(0), &self.params[&node.id], &mut cache.layer)?;
                    if *relu {
                        y = relu_forward(&y, &mut cache.relu)?;
                    }
                    if *dropout > 0.0 {
                        let s = derive_seed(seed, &format!("dropout/{}", node.id));
                        y = dropout_forward(&y, *dropout, mode, s, &mut cache.dropout)?;
                    }
                    y
                }
                LayerKind::Add { relu } => {
                    let y = input(0).add(input(1))?;
                    if *relu {
                        relu_forward(&y, &mut cache.relu)?
                    } else {
                        y
                    }
                }
            };
            outputs[i] = Some(out);
        }

        let mut logits = BTreeMap::new();
        for h in &self.graph.heads {
            if let Some(t) = &outputs[self.index[&h.node]] {
                logits.insert(h.node.clone(), t.clone());
            }
        }
        Ok(ForwardPass {
            mode,
            batch: n,
            outputs,
            caches,
            logits,
            consumed: false,
        })
    }

    /// Output of an executed node from a forward pass.
    pub fn node_output<'a>(&self, pass: &'a ForwardPass, id: &str) -> Option<&'a Tensor> {
        self.index.get(id).and_then(|&i| pass.outputs[i].as_ref())
    }

    /// Reverse-topological accumulation of the given head gradients.
    /// Gradients from several heads sum at shared nodes. Returns a gradient
    /// entry for every trainable node that ran forward (zeros when no head
    /// gradient reaches it).
    pub fn backward(&self, pass: &mut ForwardPass, head_grads: &HeadGrads) -> Result<ParamMap> {
        if pass.consumed {
            bail!(State, "backward already ran on this forward pass");
        }
        let count = self.graph.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; count];
        for (id, g) in head_grads {
            if !self.graph.heads.iter().any(|h| &h.node == id) {
                bail!(State, "{id} is not a head");
            }
            let Some(&i) = self.index.get(id) else { unreachable!() };
            if pass.outputs[i].is_none() {
                bail!(State, "head {id} did not run in this forward pass");
            }
            if g.shape() != [pass.batch, self.graph.num_classes] {
                bail!(State, "gradient for {id} has shape {:?}", g.shape());
            }
            grads[i] = Some(g.clone());
        }
        pass.consumed = true;

        let mut param_grads = ParamMap::new();
        for &i in self.order.iter().rev() {
            let node = &self.graph.nodes[i];
            if pass.outputs[i].is_none() {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                if let Some(p) = self.params.get(&node.id) {
                    param_grads.insert(node.id.clone(), p.zeros_like());
                }
                continue;
            };
            let cache = &mut pass.caches[i];
            let mut upstream: Vec<(usize, Tensor)> = Vec::with_capacity(2);
            match &node.kind {
                LayerKind::Input => {}
                LayerKind::Conv {
                    stride, pad, relu, ..
                } => {
                    let g = if *relu { relu_backward(&grad, &mut cache.relu)? } else { grad };
                    let p = &self.params[&node.id];
                    let (gi, gw, gb) = conv2d_backward(&g, p, &mut cache.layer, *stride, *pad)?;
                    param_grads.insert(node.id.clone(), LayerParams { weights: gw, bias: gb });
                    upstream.push((self.index[&node.inputs[0]], gi));
                }
                LayerKind::MaxPool { .. } => {
                    upstream.push((self.index[&node.inputs[0]], maxpool_backward(&grad, &mut cache.layer)?));
                }
                LayerKind::AvgPool { .. } => {
                    upstream.push((self.index[&node.inputs[0]], avgpool_backward(&grad, &mut cache.layer)?));
                }
                LayerKind::Fc { relu, dropout, .. } => {
                    let mut g = grad;
                    if *dropout > 0.0 {
                        g = dropout_backward(&g, &mut cache.dropout)?;
                    }
                    if *relu {
                        g = relu_backward(&g, &mut cache.relu)?;
                    }
                    let (gi, gw, gb) = fc_backward(&g, &self.params[&node.id], &mut cache.layer)?;
                    param_grads.insert(node.id.clone(), LayerParams { weights: gw, bias: gb });
                    upstream.push((self.index[&node.inputs[0]], gi));
                }
                LayerKind::Add { relu } => {
                    let g = if *relu { relu_backward(&grad, &mut cache.relu)? } else { grad };
                    upstream.push((self.index[&node.inputs[0]], g.clone()));
                    upstream.push((self.index[&node.inputs[1]], g));
                }
            }
            for (src, g) in upstream {
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(param_grads)
    }

    /// Main-branch ids of conv layers in topological order.
    pub fn main_convs(&self) -> Vec<String> {
        self.order
            .iter()
            .map(|&i| &self.graph.nodes[i])
            .filter(|n| n.branch == BranchTag::Main && matches!(n.kind, LayerKind::Conv { .. }))
            .map(|n| n.id.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_cnds, insert_residual_connections, ArchConfig, ResidualOptions};
    use crate::error::Error;

    fn desk_net(residual: bool, seed: u64) -> Network {
        let mut g = build_cnds(&ArchConfig::desk(3)).unwrap();
        if residual {
            g = insert_residual_connections(&g, &ResidualOptions::default()).unwrap();
        }
        Network::init(g, Init::He { bias_std: 0.1 }, seed).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        Tensor::gaussian(&[n, 3, 32, 32], 1.0, seed).unwrap()
    }

    #[test]
    fn train_mode_runs_both_heads() {
        let net = desk_net(true, 1);
        let pass = net.forward(&batch(2, 2), Mode::Train, 3).unwrap();
        assert_eq!(pass.logits().len(), 2);
        for l in pass.logits().values() {
            assert_eq!(l.shape(), &[2, 3]);
            assert!(l.is_finite());
        }
    }

    #[test]
    fn test_mode_runs_main_head_only() {
        let net = desk_net(true, 1);
        let pass = net.forward(&batch(2, 2), Mode::Test, 3).unwrap();
        assert_eq!(pass.logits().keys().collect::<Vec<_>>(), ["output"]);
        assert!(net.node_output(&pass, "s_avgpool").is_none());
    }

    #[test]
    fn wrong_batch_shape() {
        let net = desk_net(false, 1);
        let bad = Tensor::zeros(&[2, 3, 16, 16]).unwrap();
        assert!(matches!(net.forward(&bad, Mode::Train, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_misshapen_params() {
        let net = desk_net(false, 1);
        let (g, mut p) = net.into_parts();
        p.get_mut("conv2").unwrap().bias = Tensor::zeros(&[5]).unwrap();
        assert!(Network::new(g, p).is_err());
    }

    #[test]
    fn zero_head_grads_give_zero_param_grads() {
        let net = desk_net(true, 4);
        let mut pass = net.forward(&batch(2, 5), Mode::Train, 6).unwrap();
        let heads: HeadGrads = pass
            .logits()
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()).unwrap()))
            .collect();
        let grads = net.backward(&mut pass, &heads).unwrap();
        assert_eq!(grads.len(), net.params().len());
        for g in grads.values() {
            assert!(g.weights.data().iter().chain(g.bias.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let net = desk_net(false, 4);
        let mut pass = net.forward(&batch(1, 5), Mode::Train, 6).unwrap();
        let heads = HeadGrads::from([("output".to_string(), Tensor::filled(&[1, 3], 1.0).unwrap())]);
        net.backward(&mut pass, &heads).unwrap();
        assert!(matches!(net.backward(&mut pass, &heads), Err(Error::State(_))));
    }

    #[test]
    fn aux_head_gradient_not_available_in_test_mode() {
        let net = desk_net(false, 4);
        let mut pass = net.forward(&batch(1, 5), Mode::Test, 6).unwrap();
        let heads = HeadGrads::from([("s_output".to_string(), Tensor::filled(&[1, 3], 1.0).unwrap())]);
        assert!(matches!(net.backward(&mut pass, &heads), Err(Error::State(_))));
    }
}
