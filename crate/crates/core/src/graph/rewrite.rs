use serde::{Deserialize, Serialize};

use super::{infer_shapes, BranchTag, LayerKind, LayerNode, NetworkGraph};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualOptions {
    /// Apply ReLU to the sum at each merge.
    pub post_add_relu: bool,
}

impl From<&super::ArchConfig> for ResidualOptions {
    fn from(cfg: &super::ArchConfig) -> Self {
        ResidualOptions {
            post_add_relu: cfg.post_add_relu,
        }
    }
}

/// Adds the three main-branch shortcuts of the residual variant.
///
/// Stage `s` in 3..=5 gets a merge `res{s}_add = conv{s}_2 + shortcut`,
/// where the shortcut is the input of `conv{s}_1` (the preceding pool). When
/// channel counts differ, the shortcut first passes a 1x1 stride-1 projection
/// conv `res{s}_branch`. Main-branch readers of `conv{s}_2` are moved to the
/// merge. An auxiliary branch reading `conv4_2` is re-anchored on
/// `res4_add`; one reading `conv3_2` stays where it is. Auxiliary branches
/// never receive shortcuts.
pub fn insert_residual_connections(g: &NetworkGraph, opts: &ResidualOptions) -> Result<NetworkGraph> {
    if g.nodes.iter().any(|n| matches!(n.kind, LayerKind::Add { .. })) {
        bail!(Rewrite, "graph already contains merge nodes; residual rewrite applied twice?");
    }
    let shapes = infer_shapes(g, g.input_shape)?;
    let mut out = g.clone();

    for stage in 3..=5 {
        let first = format!("conv{stage}_1");
        let last = format!("conv{stage}_2");
        let (Some(first_node), Some(last_node)) = (g.node(&first), g.node(&last)) else {
            bail!(Rewrite, "no {first}/{last} pair; not a deeply supervised trunk");
        };
        if !first_node.branch.is_main() || !last_node.branch.is_main() || last_node.inputs != [first.clone()] {
            bail!(Rewrite, "{first} -> {last} is not a plain main-branch conv pair");
        }
        let source = first_node.inputs[0].clone();
        let source_ch = shapes[&source][0];
        let target_ch = shapes[&last][0];

        let merge = format!("res{stage}_add");
        let readers: Vec<String> = out
            .consumers(&last)
            .into_iter()
            .map(str::to_owned)
            .collect();
        for reader in readers {
            let node = out.node_mut(&reader).unwrap();
            if node.branch.is_main() || last == "conv4_2" {
                for inp in node.inputs.iter_mut().filter(|i| **i == last) {
                    *inp = merge.clone();
                }
            }
        }

        let mut pos = out.nodes.iter().position(|n| n.id == last).unwrap() + 1;
        let shortcut = if source_ch != target_ch {
            let proj = format!("res{stage}_branch");
            out.nodes.insert(
                pos,
                LayerNode {
                    id: proj.clone(),
                    kind: LayerKind::Conv {
                        out_channels: target_ch,
                        kernel: 1,
                        stride: 1,
                        pad: 0,
                        relu: false,
                    },
                    inputs: vec![source],
                    branch: BranchTag::Main,
                },
            );
            pos += 1;
            proj
        } else {
            source
        };
        out.nodes.insert(
            pos,
            LayerNode {
                id: merge,
                kind: LayerKind::Add {
                    relu: opts.post_add_relu,
                },
                inputs: vec![last, shortcut],
                branch: BranchTag::Main,
            },
        );
    }
    out.validate()?;
    infer_shapes(&out, out.input_shape)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::graph::{build_cnds, ArchConfig};

    fn residual(cfg: &ArchConfig) -> NetworkGraph {
        insert_residual_connections(&build_cnds(cfg).unwrap(), &ResidualOptions::default()).unwrap()
    }

    #[test]
    fn default_rewrite_structure() {
        let g = residual(&ArchConfig::default());
        let merges: Vec<&LayerNode> = g
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Add { .. }))
            .collect();
        assert_eq!(merges.len(), 3);
        assert_eq!(merges[0].inputs, ["conv3_2", "res3_branch"]);
        assert_eq!(merges[1].inputs, ["conv4_2", "res4_branch"]);
        assert_eq!(merges[2].inputs, ["conv5_2", "pool4"]);
        let proj = |id: &str| match g.node(id).unwrap().kind {
            LayerKind::Conv { out_channels, kernel, stride, relu, .. } => (out_channels, kernel, stride, relu),
            _ => panic!(),
        };
        assert_eq!(proj("res3_branch"), (256, 1, 1, false));
        assert_eq!(proj("res4_branch"), (512, 1, 1, false));
        assert_eq!(g.node("res3_branch").unwrap().inputs, ["pool2"]);
        assert_eq!(g.node("res4_branch").unwrap().inputs, ["pool3"]);
        assert!(g.node("res5_branch").is_none());
        assert_eq!(g.node("pool3").unwrap().inputs, ["res3_add"]);
        assert_eq!(g.node("pool4").unwrap().inputs, ["res4_add"]);
        assert_eq!(g.node("pool5").unwrap().inputs, ["res5_add"]);
        // default attach point conv3_2 is left alone
        assert_eq!(g.node("s_avgpool").unwrap().inputs, ["conv3_2"]);
        // no shortcut on the auxiliary branch
        assert!(merges.iter().all(|n| n.branch.is_main()));
    }

    #[test]
    fn aux_on_conv4_2_moves_to_merge() {
        let g = residual(&ArchConfig {
            aux_attach: Some("conv4_2".into()),
            ..Default::default()
        });
        assert_eq!(g.node("s_avgpool").unwrap().inputs, ["res4_add"]);
        assert_eq!(g.consumers("conv4_2"), ["res4_add"]);
    }

    #[test]
    fn equal_widths_need_no_projection() {
        let g = residual(&ArchConfig {
            stage_channels: [16; 5],
            input_shape: [3, 64, 64],
            ..Default::default()
        });
        assert_eq!(g.nodes.iter().filter(|n| matches!(n.kind, LayerKind::Add { .. })).count(), 3);
        assert!(g.nodes.iter().all(|n| !n.id.ends_with("_branch")));
    }

    #[test]
    fn second_application_fails() {
        let g = residual(&ArchConfig::default());
        assert!(matches!(
            insert_residual_connections(&g, &ResidualOptions::default()),
            Err(Error::Rewrite(_))
        ));
    }

    #[test]
    fn post_add_relu_flag() {
        let g = insert_residual_connections(
            &build_cnds(&ArchConfig::default()).unwrap(),
            &ResidualOptions { post_add_relu: true },
        )
        .unwrap();
        assert_eq!(g.node("res5_add").unwrap().kind, LayerKind::Add { relu: true });
    }
}
