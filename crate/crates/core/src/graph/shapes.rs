use std::collections::BTreeMap;

use super::{LayerKind, NetworkGraph};
use crate::error::{bail, Result};
use crate::layers::{conv_output_extent, pool_output_extent};

/// Per-sample output shape of every node (`[C, H, W]` for feature maps,
/// `[D]` after an fc layer).
pub type ShapeMap = BTreeMap<String, Vec<usize>>;

fn spatial(id: &str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => bail!(Shape, "{id} needs a [C, H, W] feature map, got {shape:?}"),
    }
}

/// Annotates every node with its per-sample output shape for a given input
/// geometry. Merge nodes must see two identical shapes.
pub fn infer_shapes(g: &NetworkGraph, input_shape: [usize; 3]) -> Result<ShapeMap> {
    let mut shapes = ShapeMap::new();
    for i in g.topo_order()? {
        let n = &g.nodes[i];
        let input = |k: usize| -> &Vec<usize> { &shapes[&n.inputs[k]] };
        let out = match &n.kind {
            LayerKind::Input => input_shape.to_vec(),
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let (_, h, w) = spatial(&n.id, input(0))?;
                match (
                    conv_output_extent(h, *kernel, *stride, *pad),
                    conv_output_extent(w, *kernel, *stride, *pad),
                ) {
                    (Some(oh), Some(ow)) => vec![*out_channels, oh, ow],
                    _ => bail!(Shape, "{}: {kernel}x{kernel} kernel does not fit {h}x{w}", n.id),
                }
            }
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                let (c, h, w) = spatial(&n.id, input(0))?;
                match (
                    pool_output_extent(h, *kernel, *stride),
                    pool_output_extent(w, *kernel, *stride),
                ) {
                    (Some(oh), Some(ow)) => vec![c, oh, ow],
                    _ => bail!(Shape, "{}: {kernel}x{kernel} window does not fit {h}x{w}", n.id),
                }
            }
            LayerKind::Fc { out_features, .. } => vec![*out_features],
            LayerKind::Add { .. } => {
                let (a, b) = (input(0), input(1));
                if a != b {
                    bail!(
                        Shape,
                        "merge {} adds {} {a:?} and {} {b:?}",
                        n.id,
                        n.inputs[0],
                        n.inputs[1]
                    );
                }
                a.clone()
            }
        };
        shapes.insert(n.id.clone(), out);
    }
    Ok(shapes)
}
