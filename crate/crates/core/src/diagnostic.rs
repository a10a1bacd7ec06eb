//! The vanishing-gradient probe that decides where an auxiliary classifier
//! goes: train-mode backward passes through a branchless network, recording
//! how large each main-branch conv layer's weight gradient is.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{HeadGrads, Init, Network, NetworkGraph};
use crate::layers::Mode;
use crate::rng::derive_seed;
use crate::supervision::{softmax_xent, LabelBatch};
use crate::tensor::Tensor;

/// Threshold below which a layer's mean gradient counts as vanished.
pub const DEFAULT_THRESHOLD: f64 = 1e-7;

/// Allowed probe lengths.
pub const PROBE_ITERS: std::ops::RangeInclusive<usize> = 10..=50;

/// What one probe step covers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeUnit {
    /// One mini-batch per recorded step, cycling through the batches.
    #[default]
    Iter,
    /// One pass over every batch per recorded step; the step's value is the
    /// mean over the pass.
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub unit: ProbeUnit,
    pub init: Init,
    /// Learning rate for plain SGD updates between steps. `None` keeps the
    /// probe read-only.
    pub sgd_lr: Option<f64>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            unit: ProbeUnit::Iter,
            init: Init::default(),
            sgd_lr: None,
        }
    }
}

/// Per-layer mean |dL/dW| series from a probe run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    /// Main-branch conv layers in topological order.
    pub layers: Vec<String>,
    /// `series[l][t]` is layer `l`'s statistic at probe step `t`.
    pub series: Vec<Vec<f64>>,
    /// Mean of each layer's series; the quantity compared to the threshold.
    pub means: Vec<f64>,
}

impl GradientReport {
    /// Builds a report from per-layer series, computing the means.
    pub fn from_series(layers: Vec<String>, series: Vec<Vec<f64>>) -> Result<Self> {
        if layers.len() != series.len() {
            bail!(Input, "{} layer ids for {} series", layers.len(), series.len());
        }
        if series.iter().flatten().any(|v| !(*v >= 0.0)) {
            bail!(Input, "gradient statistics must be non-negative");
        }
        let means = series
            .iter()
            .map(|s| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 })
            .collect();
        Ok(GradientReport { layers, series, means })
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Long-format CSV: `iter,layer_id,mean_abs_grad`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,layer_id,mean_abs_grad\n");
        let steps = self.series.first().map_or(0, Vec::len);
        for t in 0..steps {
            for (l, id) in self.layers.iter().enumerate() {
                out.push_str(&format!("{t},{id},{:e}\n", self.series[l][t]));
            }
        }
        out
    }

    /// One row per layer with its series mean: `layer_id,mean_abs_grad`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("layer_id,mean_abs_grad\n");
        for (id, m) in self.layers.iter().zip(&self.means) {
            out.push_str(&format!("{id},{m:e}\n"));
        }
        out
    }
}

/// Initializes `graph` from `seed` and records the mean absolute weight
/// gradient of every main-branch conv over `iters` probe steps, using only
/// the main head's loss. Batches are `(images, labels)` pairs.
pub fn run_probe(
    graph: &NetworkGraph,
    batches: &[(Tensor, LabelBatch)],
    iters: usize,
    seed: u64,
    opts: &ProbeOptions,
) -> Result<GradientReport> {
    if graph.has_aux() {
        bail!(
            Precondition,
            "the probe runs on a branchless network; this graph has an auxiliary head"
        );
    }
    if !PROBE_ITERS.contains(&iters) {
        bail!(Input, "probe length {iters} outside {PROBE_ITERS:?}");
    }
    if batches.is_empty() {
        bail!(Input, "the probe needs at least one batch");
    }
    let mut net = Network::init(graph.clone(), opts.init, seed)?;
    let layers = net.main_convs();
    let head = graph.main_head().node.clone();
    let mut series = vec![Vec::with_capacity(iters); layers.len()];
    let mut step = 0usize;

    for t in 0..iters {
        let span: Vec<&(Tensor, LabelBatch)> = match opts.unit {
            ProbeUnit::Iter => vec![&batches[t % batches.len()]],
            ProbeUnit::Epoch => batches.iter().collect(),
        };
        let mut sums = vec![0.0; layers.len()];
        for (images, labels) in &span {
            let mut pass = net.forward(images, Mode::Train, derive_seed(seed, &format!("probe/{step}")))?;
            step += 1;
            let logits = pass.head(&head).expect("main head always runs");
            let (_, grad) = softmax_xent(logits, labels)?;
            let grads = net.backward(&mut pass, &HeadGrads::from([(head.clone(), grad)]))?;
            for (s, id) in sums.iter_mut().zip(&layers) {
                *s += grads[id].weights.mean_abs()?;
            }
            if let Some(lr) = opts.sgd_lr {
                for (id, p) in net.params_mut() {
                    let g = &grads[id];
                    for (w, d) in p.weights.data_mut().iter_mut().zip(g.weights.data()) {
                        *w -= lr * d;
                    }
                    for (b, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                        *b -= lr * d;
                    }
                }
            }
        }
        for (s, sum) in series.iter_mut().zip(sums) {
            s.push(sum / span.len() as f64);
        }
    }
    GradientReport::from_series(layers, series)
}

/// The shallowest layer whose mean statistic is strictly below `threshold`,
/// or `None` when every layer is at or above it.
pub fn select_branch_point(report: &GradientReport, threshold: f64) -> Result<Option<String>> {
    if report.is_empty() {
        bail!(Input, "empty gradient report");
    }
    Ok(report
        .layers
        .iter()
        .zip(&report.means)
        .find(|(_, &m)| m < threshold)
        .map(|(id, _)| id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::graph::{build_cnds, build_conv_stack, ArchConfig, ConvStackConfig, Head, LayerKind, LayerNode, BranchTag};
    use crate::layers::LayerParams;
    use proptest::prelude::*;

    fn report(means: &[f64]) -> GradientReport {
        let layers = (0..means.len()).map(|i| format!("l{i}")).collect();
        GradientReport::from_series(layers, means.iter().map(|&m| vec![m]).collect()).unwrap()
    }

    fn batches(shape: [usize; 3], k: usize, n: usize, count: usize, seed: u64) -> Vec<(Tensor, LabelBatch)> {
        (0..count)
            .map(|b| {
                let mut s = vec![n];
                s.extend_from_slice(&shape);
                let x = Tensor::gaussian(&s, 1.0, seed + b as u64).unwrap();
                let y = LabelBatch::new((0..n).map(|i| (i + b) % k).collect(), k).unwrap();
                (x, y)
            })
            .collect()
    }

    #[test]
    fn crafted_report_picks_first_vanished_layer() {
        let layers: Vec<String> = ["conv1", "conv2", "conv3_1", "conv3_2", "conv4_1", "conv4_2"]
            .map(String::from)
            .to_vec();
        let r = GradientReport::from_series(
            layers,
            [1e-3, 1e-4, 2e-7, 5e-8, 1e-8, 3e-9].iter().map(|&m| vec![m]).collect(),
        )
        .unwrap();
        assert_eq!(select_branch_point(&r, DEFAULT_THRESHOLD).unwrap().as_deref(), Some("conv3_2"));
    }

    #[test]
    fn series_mean_of_two_values() {
        let r = GradientReport::from_series(vec!["a".into()], vec![vec![1e-8, 3e-8]]).unwrap();
        assert!((r.means[0] - 2e-8).abs() < 1e-22);
        assert_eq!(select_branch_point(&r, DEFAULT_THRESHOLD).unwrap().as_deref(), Some("a"));
    }

    #[test]
    fn healthy_and_boundary_cases() {
        let r = report(&[1e-3; 5]);
        assert_eq!(select_branch_point(&r, DEFAULT_THRESHOLD).unwrap(), None);
        assert_eq!(select_branch_point(&r, 0.0).unwrap(), None);
        assert_eq!(select_branch_point(&r, 1e30).unwrap().as_deref(), Some("l0"));
        // strictly below: equal is not enough
        assert_eq!(select_branch_point(&r, 1e-3).unwrap(), None);
    }

    #[test]
    fn empty_report_is_an_input_error() {
        let r = GradientReport::from_series(vec![], vec![]).unwrap();
        assert!(matches!(select_branch_point(&r, 1e-7), Err(Error::Input(_))));
    }

    #[test]
    fn negative_statistics_are_rejected() {
        assert!(GradientReport::from_series(vec!["a".into()], vec![vec![-1.0]]).is_err());
    }

    fn brute_force(means: &[f64], threshold: f64) -> Option<usize> {
        let mut found = None;
        for i in (0..means.len()).rev() {
            if means[i] < threshold {
                found = Some(i);
            }
        }
        found
    }

    proptest! {
        #[test]
        fn matches_linear_scan(means in prop::collection::vec(0.0f64..1e-5, 1..12), t in 0.0f64..1e-5) {
            let r = report(&means);
            let got = select_branch_point(&r, t).unwrap();
            prop_assert_eq!(got, brute_force(&means, t).map(|i| format!("l{i}")));
        }

        #[test]
        fn raising_threshold_never_goes_deeper(
            means in prop::collection::vec(0.0f64..1e-5, 1..12),
            a in 0.0f64..1e-5,
            b in 0.0f64..1e-5,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let r = report(&means);
            let pos = |t| select_branch_point(&r, t).unwrap().map(|id| r.layers.iter().position(|l| *l == id).unwrap());
            if let Some(p_lo) = pos(lo) {
                let p_hi = pos(hi).expect("a higher threshold still selects");
                prop_assert!(p_hi <= p_lo);
            }
        }
    }

    #[test]
    fn aux_graph_is_a_precondition_error() {
        let g = build_cnds(&ArchConfig::desk(3)).unwrap();
        let data = batches([3, 32, 32], 3, 2, 1, 0);
        assert!(matches!(
            run_probe(&g, &data, 10, 0, &ProbeOptions::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn probe_length_is_bounded() {
        let g = build_conv_stack(&ConvStackConfig { depth: 2, ..Default::default() }).unwrap();
        let data = batches([3, 8, 8], 3, 2, 1, 0);
        assert!(run_probe(&g, &data, 9, 0, &ProbeOptions::default()).is_err());
        assert!(run_probe(&g, &data, 51, 0, &ProbeOptions::default()).is_err());
    }

    #[test]
    fn branchless_trunk_reports_eight_convs_deterministically() {
        let g = build_cnds(&ArchConfig { aux_attach: None, ..ArchConfig::desk(3) }).unwrap();
        let data = batches([3, 32, 32], 3, 2, 2, 5);
        let r = run_probe(&g, &data, 10, 7, &ProbeOptions::default()).unwrap();
        assert_eq!(
            r.layers,
            ["conv1", "conv2", "conv3_1", "conv3_2", "conv4_1", "conv4_2", "conv5_1", "conv5_2"]
        );
        assert!(r.series.iter().all(|s| s.len() == 10));
        assert_eq!(r, run_probe(&g, &data, 10, 7, &ProbeOptions::default()).unwrap());
    }

    /// data [1,2,2] -> conv1 (1x1, one channel, no ReLU) -> fc output (2 classes).
    fn two_layer_toy() -> NetworkGraph {
        let g = NetworkGraph {
            input_shape: [1, 2, 2],
            num_classes: 2,
            nodes: vec![
                LayerNode { id: "data".into(), kind: LayerKind::Input, inputs: vec![], branch: BranchTag::Main },
                LayerNode {
                    id: "conv1".into(),
                    kind: LayerKind::Conv { out_channels: 1, kernel: 1, stride: 1, pad: 0, relu: false },
                    inputs: vec!["data".into()],
                    branch: BranchTag::Main,
                },
                LayerNode {
                    id: "output".into(),
                    kind: LayerKind::Fc { out_features: 2, relu: false, dropout: 0.0 },
                    inputs: vec!["conv1".into()],
                    branch: BranchTag::Main,
                },
            ],
            heads: vec![Head { node: "output".into(), branch: BranchTag::Main }],
        };
        g.validate().unwrap();
        g
    }

    /// Hand-derived gradients for the toy: h = w x, z = V h, dz = p - onehot,
    /// dL/dw = sum_j (V^T dz)_j x_j.
    fn chain_rule_oracle(x: [f64; 4], w: f64, v: [[f64; 4]; 2], label: usize) -> f64 {
        let h = x.map(|xi| w * xi);
        let z: Vec<f64> = v.iter().map(|row| row.iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
        let zmax = z[0].max(z[1]);
        let e: Vec<f64> = z.iter().map(|zi| (zi - zmax).exp()).collect();
        let s = e[0] + e[1];
        let dz: Vec<f64> = (0..2).map(|k| e[k] / s - if k == label { 1.0 } else { 0.0 }).collect();
        let dh: Vec<f64> = (0..4).map(|j| v[0][j] * dz[0] + v[1][j] * dz[1]).collect();
        dh.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().abs()
    }

    #[test]
    fn toy_gradients_match_chain_rule() {
        let g = two_layer_toy();
        let w = 0.7;
        let v = [[0.3, -0.2, 0.5, 0.1], [-0.4, 0.6, 0.2, -0.3]];
        for x in [[0.0; 4], [1.0, -2.0, 0.5, 3.0]] {
            let mut params = crate::graph::ParamMap::new();
            params.insert(
                "conv1".into(),
                LayerParams::new(Tensor::filled(&[1, 1, 1, 1], w).unwrap(), Tensor::zeros(&[1]).unwrap()).unwrap(),
            );
            params.insert(
                "output".into(),
                LayerParams::new(Tensor::new(vec![2, 4], v.concat()).unwrap(), Tensor::zeros(&[2]).unwrap()).unwrap(),
            );
            let net = Network::new(g.clone(), params).unwrap();
            let images = Tensor::new(vec![1, 1, 2, 2], x.to_vec()).unwrap();
            let labels = LabelBatch::new(vec![1], 2).unwrap();
            let mut pass = net.forward(&images, Mode::Train, 0).unwrap();
            let (_, dz) = softmax_xent(pass.head("output").unwrap(), &labels).unwrap();
            let grads = net.backward(&mut pass, &HeadGrads::from([("output".into(), dz)])).unwrap();
            let got = grads["conv1"].weights.mean_abs().unwrap();
            let want = chain_rule_oracle(x, w, v, 1);
            assert!((got - want).abs() <= 1e-14 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn narrow_stack_gradients_decay_with_depth() {
        let cfg = ConvStackConfig::default();
        let g = build_conv_stack(&cfg).unwrap();
        let data = batches(cfg.input_shape, cfg.num_classes, 4, 2, 1);
        let r = run_probe(&g, &data, 10, 3, &ProbeOptions::default()).unwrap();
        assert_eq!(r.layers.len(), 12);
        for pair in r.means.windows(2) {
            assert!(pair[1] <= pair[0], "{:?}", r.means);
        }
        let (first, last) = (r.means[0], r.means[11]);
        assert!(first >= 10.0 * last, "{first} vs {last}");
        let mid = (first * last).sqrt();
        let pick = select_branch_point(&r, mid).unwrap().unwrap();
        assert!(pick != "conv1" && pick != "conv12", "{pick}");
    }

    #[test]
    fn sgd_mode_changes_later_steps() {
        let cfg = ConvStackConfig { depth: 3, ..Default::default() };
        let g = build_conv_stack(&cfg).unwrap();
        let data = batches(cfg.input_shape, 3, 4, 1, 2);
        let ro = run_probe(&g, &data, 10, 1, &ProbeOptions::default()).unwrap();
        let sgd = run_probe(&g, &data, 10, 1, &ProbeOptions { sgd_lr: Some(0.5), ..Default::default() }).unwrap();
        // read-only on one batch repeats the same value
        assert!(ro.series[0].iter().all(|&v| v == ro.series[0][0]));
        assert_eq!(sgd.series[0][0], ro.series[0][0]);
        assert_ne!(sgd.series[0][9], ro.series[0][9]);
    }

    #[test]
    fn epoch_unit_averages_a_full_pass() {
        let cfg = ConvStackConfig { depth: 2, ..Default::default() };
        let g = build_conv_stack(&cfg).unwrap();
        let data = batches(cfg.input_shape, 3, 2, 3, 4);
        let it = run_probe(&g, &data, 12, 0, &ProbeOptions::default()).unwrap();
        let ep = run_probe(&g, &data, 10, 0, &ProbeOptions { unit: ProbeUnit::Epoch, ..Default::default() }).unwrap();
        let want = (it.series[1][0] + it.series[1][1] + it.series[1][2]) / 3.0;
        assert!((ep.series[1][0] - want).abs() < 1e-15 * want.max(1e-300));
    }

    #[test]
    fn csv_layout() {
        let r = GradientReport::from_series(vec!["a".into(), "b".into()], vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,layer_id,mean_abs_grad");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("0,b,"));
        assert!(r.summary_csv().contains("b,3.5e0"));
    }
}
