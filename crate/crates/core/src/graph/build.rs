use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{BranchTag, Head, LayerKind, LayerNode, NetworkGraph};
use crate::error::{bail, Result};
use crate::layers::conv_output_extent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture hyperparameters of the deeply supervised trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Per-sample input `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Multiplies every channel count and fc width.
    pub width: f64,
    /// Output channels of conv1, conv2, conv3_x, conv4_x, conv5_x.
    pub stage_channels: [usize; 5],
    pub fc_main: usize,
    pub fc_aux: usize,
    pub aux_conv_channels: usize,
    pub dropout: f64,
    /// Main-branch node the auxiliary classifier reads from; `None` builds a
    /// branchless trunk.
    pub aux_attach: Option<String>,
    pub post_add_relu: bool,
    pub main_pool: PoolGeometry,
    pub aux_pool: PoolGeometry,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_shape: [3, 227, 227],
            num_classes: 205,
            width: 1.0,
            stage_channels: [64, 128, 256, 512, 512],
            fc_main: 4096,
            fc_aux: 1024,
            aux_conv_channels: 128,
            dropout: 0.5,
            aux_attach: Some("conv3_2".into()),
            post_add_relu: false,
            main_pool: PoolGeometry { kernel: 2, stride: 2 },
            aux_pool: PoolGeometry { kernel: 5, stride: 2 },
        }
    }
}

impl ArchConfig {
    /// Desk-scale variant: 32x32 crops, one eighth of the full width.
    pub fn desk(num_classes: usize) -> Self {
        ArchConfig {
            input_shape: [3, 32, 32],
            num_classes,
            width: 0.125,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            bail!(Config, "width factor must be positive, got {}", self.width);
        }
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if self.input_shape.contains(&0) {
            bail!(Config, "input shape {:?} has a zero extent", self.input_shape);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout rate must lie in [0, 1), got {}", self.dropout);
        }
        for p in [self.main_pool, self.aux_pool] {
            if p.kernel == 0 || p.stride == 0 {
                bail!(Config, "pool kernel and stride must be >= 1");
            }
        }
        if self.stage_channels.contains(&0) || self.fc_main == 0 || self.fc_aux == 0 || self.aux_conv_channels == 0 {
            bail!(Config, "channel counts and fc widths must be >= 1");
        }
        Ok(())
    }

    fn scaled(&self, c: usize) -> usize {
        ((c as f64) * self.width).round().max(1.0) as usize
    }
}

/// Incremental graph assembly that tracks the spatial extent of every
/// feature map, so pool windows can be clamped to what is available.
struct Builder {
    nodes: Vec<LayerNode>,
    spatial: HashMap<String, (usize, usize)>,
}

impl Builder {
    fn new(input_shape: [usize; 3]) -> Self {
        let mut b = Builder {
            nodes: Vec::new(),
            spatial: HashMap::new(),
        };
        b.nodes.push(LayerNode {
            id: "data".into(),
            kind: LayerKind::Input,
            inputs: vec![],
            branch: BranchTag::Main,
        });
        b.spatial.insert("data".into(), (input_shape[1], input_shape[2]));
        b
    }

    fn push(&mut self, id: &str, kind: LayerKind, input: &str, branch: BranchTag) -> Result<String> {
        let spatial = self.spatial.get(input).copied();
        let next = match (&kind, spatial) {
            (LayerKind::Conv { kernel, stride, pad, .. }, Some((h, w))) => {
                match (
                    conv_output_extent(h, *kernel, *stride, *pad),
                    conv_output_extent(w, *kernel, *stride, *pad),
                ) {
                    (Some(oh), Some(ow)) => Some((oh, ow)),
                    _ => bail!(Config, "{id}: kernel does not fit a {h}x{w} input"),
                }
            }
            (LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride }, Some((h, w))) => {
                Some(((h - kernel) / stride + 1, (w - kernel) / stride + 1))
            }
            _ => None,
        };
        if let Some(s) = next {
            self.spatial.insert(id.into(), s);
        }
        self.nodes.push(LayerNode {
            id: id.into(),
            kind,
            inputs: vec![input.into()],
            branch,
        });
        Ok(id.into())
    }

    /// Pool whose window is shrunk to the incoming extent when it would not
    /// fit otherwise.
    fn pool(&mut self, id: &str, avg: bool, geom: PoolGeometry, input: &str, branch: BranchTag) -> Result<String> {
        let (h, w) = self.spatial[input];
        let kernel = geom.kernel.min(h).min(w);
        let kind = if avg {
            LayerKind::AvgPool { kernel, stride: geom.stride }
        } else {
            LayerKind::MaxPool { kernel, stride: geom.stride }
        };
        self.push(id, kind, input, branch)
    }
}

fn conv(out_channels: usize, kernel: usize, stride: usize) -> LayerKind {
    LayerKind::Conv {
        out_channels,
        kernel,
        stride,
        pad: kernel / 2,
        relu: true,
    }
}

fn fc(out_features: usize, relu: bool, dropout: f64) -> LayerKind {
    LayerKind::Fc {
        out_features,
        relu,
        dropout,
    }
}

/// Builds the eight-conv deeply supervised network: a 7x7 stride-2 conv and
/// seven 3x3 convs in five pooled stages, two dropout fc layers and a
/// classifier on the main branch, plus (when `aux_attach` is set) an
/// auxiliary head of avgpool, 1x1 conv, two dropout fc layers and a
/// classifier.
pub fn build_cnds(cfg: &ArchConfig) -> Result<NetworkGraph> {
    cfg.validate()?;
    let main = BranchTag::Main;
    let [c1, c2, c3, c4, c5] = cfg.stage_channels.map(|c| cfg.scaled(c));
    let mut b = Builder::new(cfg.input_shape);

    let mut x = b.push("conv1", conv(c1, 7, 2), "data", main)?;
    x = b.pool("pool1", false, cfg.main_pool, &x, main)?;
    x = b.push("conv2", conv(c2, 3, 1), &x, main)?;
    x = b.pool("pool2", false, cfg.main_pool, &x, main)?;
    for (stage, ch) in [(3, c3), (4, c4), (5, c5)] {
        x = b.push(&format!("conv{stage}_1"), conv(ch, 3, 1), &x, main)?;
        x = b.push(&format!("conv{stage}_2"), conv(ch, 3, 1), &x, main)?;
        x = b.pool(&format!("pool{stage}"), false, cfg.main_pool, &x, main)?;
    }
    x = b.push("fc6", fc(cfg.scaled(cfg.fc_main), true, cfg.dropout), &x, main)?;
    x = b.push("fc7", fc(cfg.scaled(cfg.fc_main), true, cfg.dropout), &x, main)?;
    b.push("output", fc(cfg.num_classes, false, 0.0), &x, main)?;
    let mut heads = vec![Head {
        node: "output".into(),
        branch: main,
    }];

    if let Some(attach) = &cfg.aux_attach {
        match b.nodes.iter().find(|n| &n.id == attach) {
            Some(n) if matches!(n.kind, LayerKind::Conv { .. } | LayerKind::MaxPool { .. }) => {}
            Some(_) => bail!(Config, "auxiliary branch cannot attach to {attach}: not a feature map"),
            None => bail!(Config, "auxiliary attach point {attach} does not exist"),
        }
        let aux = BranchTag::Auxiliary(0);
        let mut s = b.pool("s_avgpool", true, cfg.aux_pool, attach, aux)?;
        s = b.push(
            "s_conv",
            LayerKind::Conv {
                out_channels: cfg.scaled(cfg.aux_conv_channels),
                kernel: 1,
                stride: 1,
                pad: 0,
                relu: true,
            },
            &s,
            aux,
        )?;
        s = b.push("s_fc1", fc(cfg.scaled(cfg.fc_aux), true, cfg.dropout), &s, aux)?;
        s = b.push("s_fc2", fc(cfg.scaled(cfg.fc_aux), true, cfg.dropout), &s, aux)?;
        b.push("s_output", fc(cfg.num_classes, false, 0.0), &s, aux)?;
        heads.push(Head {
            node: "s_output".into(),
            branch: aux,
        });
    }

    let g = NetworkGraph {
        input_shape: cfg.input_shape,
        num_classes: cfg.num_classes,
        nodes: b.nodes,
        heads,
    };
    g.validate()?;
    Ok(g)
}

/// A plain chain of 3x3 convs followed by a classifier; used to study how
/// gradient magnitudes evolve with depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvStackConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Channel multiplier applied per layer (layer `l` has
    /// `round(base * growth^l)` channels).
    pub growth: f64,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl Default for ConvStackConfig {
    fn default() -> Self {
        ConvStackConfig {
            depth: 12,
            base_channels: 4,
            growth: std::f64::consts::SQRT_2,
            input_shape: [3, 8, 8],
            num_classes: 3,
        }
    }
}

pub fn build_conv_stack(cfg: &ConvStackConfig) -> Result<NetworkGraph> {
    if cfg.depth == 0 || cfg.base_channels == 0 || !(cfg.growth > 0.0) {
        bail!(Config, "conv stack needs depth, base channels and growth > 0");
    }
    let mut b = Builder::new(cfg.input_shape);
    let mut x = "data".to_string();
    for l in 0..cfg.depth {
        let ch = ((cfg.base_channels as f64) * cfg.growth.powi(l as i32)).round().max(1.0) as usize;
        x = b.push(&format!("conv{}", l + 1), conv(ch, 3, 1), &x, BranchTag::Main)?;
    }
    b.push("output", fc(cfg.num_classes, false, 0.0), &x, BranchTag::Main)?;
    let g = NetworkGraph {
        input_shape: cfg.input_shape,
        num_classes: cfg.num_classes,
        nodes: b.nodes,
        heads: vec![Head {
            node: "output".into(),
            branch: BranchTag::Main,
        }],
    };
    g.validate()?;
    Ok(g)
}
