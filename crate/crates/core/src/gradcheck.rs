//! Finite-difference verification of every backward pass: each layer kind on
//! small random instances, and the whole deeply supervised residual network
//! under the weighted two-head loss.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{build_cnds, insert_residual_connections, ArchConfig, HeadGrads, Init, Network, ResidualOptions};
use crate::layers::{
    avgpool_backward, avgpool_forward, conv2d_backward, conv2d_forward, dropout_backward, dropout_forward,
    fc_backward, fc_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward, LayerCache,
    LayerParams, Mode,
};
use crate::rng::{derive_seed, derived_stream};
use crate::supervision::{combined_loss, softmax_xent, LabelBatch};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const REL_TOL: f64 = 1e-4;

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape()).expect("shape of an existing tensor");
    for i in 0..x.len() {
        grad.data_mut()[i] = central_difference(&mut probe, i, &mut f);
    }
    grad
}

fn central_difference(probe: &mut Tensor, i: usize, f: &mut impl FnMut(&Tensor) -> f64) -> f64 {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + FD_EPS;
    let up = f(probe);
    probe.data_mut()[i] = orig - FD_EPS;
    let down = f(probe);
    probe.data_mut()[i] = orig;
    (up - down) / (2.0 * FD_EPS)
}

/// Max-norm relative error `|a - n|_inf / max(|a|_inf, |n|_inf)`; zero when
/// both are identically zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub rel_err: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.rel_err < REL_TOL
    }
}

fn row(name: &str, analytic: &Tensor, numeric: &Tensor) -> CheckRow {
    CheckRow {
        name: name.to_owned(),
        rel_err: relative_error(analytic.data(), numeric.data()),
    }
}

/// Projects a layer output onto fixed random weights so every output
/// coordinate contributes to the scalar being differentiated.
fn projector(shape: &[usize], seed: u64) -> Result<Tensor> {
    Tensor::gaussian(shape, 1.0, seed)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks each layer kind's backward against finite differences of its
/// forward, on small random instances.
pub fn layer_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let s = |tag: &str| derive_seed(seed, tag);
    let mut rows = vec![];

    // conv: stride 2 and padding exercise the im2col bookkeeping
    {
        let x = Tensor::gaussian(&[2, 3, 7, 6], 1.0, s("conv/x"))?;
        let p = LayerParams::new(Tensor::gaussian(&[4, 3, 3, 3], 0.5, s("conv/w"))?, Tensor::gaussian(&[4], 0.5, s("conv/b"))?)?;
        let (stride, pad) = (2, 1);
        let y = conv2d_forward(&x, &p, stride, pad, &mut LayerCache::new())?;
        let r = projector(y.shape(), s("conv/r"))?;
        let mut cache = LayerCache::new();
        conv2d_forward(&x, &p, stride, pad, &mut cache)?;
        let (gx, gw, gb) = conv2d_backward(&r, &p, &mut cache, stride, pad)?;
        let loss = |x: &Tensor, p: &LayerParams| dot(&conv2d_forward(x, p, stride, pad, &mut LayerCache::new()).unwrap(), &r);
        rows.push(row("conv/input", &gx, &numeric_grad(&x, |x| loss(x, &p))));
        rows.push(row(
            "conv/weights",
            &gw,
            &numeric_grad(&p.weights, |w| loss(&x, &LayerParams { weights: w.clone(), bias: p.bias.clone() })),
        ));
        rows.push(row(
            "conv/bias",
            &gb,
            &numeric_grad(&p.bias, |b| loss(&x, &LayerParams { weights: p.weights.clone(), bias: b.clone() })),
        ));
    }

    // max pool on distinct values, so no window has a tie within FD_EPS
    {
        let mut rng = derived_stream(s("maxpool/x"), "perm");
        let mut vals: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng);
        let x = Tensor::new(vec![2, 2, 6, 6], vals)?;
        let y = maxpool_forward(&x, 3, 2, &mut LayerCache::new())?;
        let r = projector(y.shape(), s("maxpool/r"))?;
        let mut cache = LayerCache::new();
        maxpool_forward(&x, 3, 2, &mut cache)?;
        let gx = maxpool_backward(&r, &mut cache)?;
        let n = numeric_grad(&x, |x| dot(&maxpool_forward(x, 3, 2, &mut LayerCache::new()).unwrap(), &r));
        rows.push(row("maxpool/input", &gx, &n));
    }

    {
        let x = Tensor::gaussian(&[2, 2, 7, 7], 1.0, s("avgpool/x"))?;
        let y = avgpool_forward(&x, 3, 2, &mut LayerCache::new())?;
        let r = projector(y.shape(), s("avgpool/r"))?;
        let mut cache = LayerCache::new();
        avgpool_forward(&x, 3, 2, &mut cache)?;
        let gx = avgpool_backward(&r, &mut cache)?;
        let n = numeric_grad(&x, |x| dot(&avgpool_forward(x, 3, 2, &mut LayerCache::new()).unwrap(), &r));
        rows.push(row("avgpool/input", &gx, &n));
    }

    // relu away from the kink
    {
        let mut x = Tensor::gaussian(&[3, 11], 1.0, s("relu/x"))?;
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let r = projector(x.shape(), s("relu/r"))?;
        let mut cache = LayerCache::new();
        relu_forward(&x, &mut cache)?;
        let gx = relu_backward(&r, &mut cache)?;
        let n = numeric_grad(&x, |x| dot(&relu_forward(x, &mut LayerCache::new()).unwrap(), &r));
        rows.push(row("relu/input", &gx, &n));
    }

    // dropout with the mask held fixed by the seed
    {
        let x = Tensor::gaussian(&[4, 9], 1.0, s("dropout/x"))?;
        let r = projector(x.shape(), s("dropout/r"))?;
        let mask_seed = s("dropout/mask");
        let mut cache = LayerCache::new();
        dropout_forward(&x, 0.5, Mode::Train, mask_seed, &mut cache)?;
        let gx = dropout_backward(&r, &mut cache)?;
        let n = numeric_grad(&x, |x| dot(&dropout_forward(x, 0.5, Mode::Train, mask_seed, &mut LayerCache::new()).unwrap(), &r));
        rows.push(row("dropout/input", &gx, &n));
    }

    {
        let x = Tensor::gaussian(&[3, 2, 2, 3], 1.0, s("fc/x"))?;
        let p = LayerParams::new(Tensor::gaussian(&[5, 12], 0.5, s("fc/w"))?, Tensor::gaussian(&[5], 0.5, s("fc/b"))?)?;
        let y = fc_forward(&x, &p, &mut LayerCache::new())?;
        let r = projector(y.shape(), s("fc/r"))?;
        let mut cache = LayerCache::new();
        fc_forward(&x, &p, &mut cache)?;
        let (gx, gw, gb) = fc_backward(&r, &p, &mut cache)?;
        let loss = |x: &Tensor, p: &LayerParams| dot(&fc_forward(x, p, &mut LayerCache::new()).unwrap(), &r);
        rows.push(row("fc/input", &gx, &numeric_grad(&x, |x| loss(x, &p))));
        rows.push(row(
            "fc/weights",
            &gw,
            &numeric_grad(&p.weights, |w| loss(&x, &LayerParams { weights: w.clone(), bias: p.bias.clone() })),
        ));
        rows.push(row(
            "fc/bias",
            &gb,
            &numeric_grad(&p.bias, |b| loss(&x, &LayerParams { weights: p.weights.clone(), bias: b.clone() })),
        ));
    }

    {
        let z = Tensor::gaussian(&[4, 6], 2.0, s("softmax/z"))?;
        let y = LabelBatch::new(vec![0, 5, 2, 2], 6)?;
        let (_, g) = softmax_xent(&z, &y)?;
        let n = numeric_grad(&z, |z| softmax_xent(z, &y).unwrap().0);
        rows.push(row("softmax_xent/logits", &g, &n));
    }
    Ok(rows)
}

/// The combined loss `L_main + alpha * L_aux` of a network on one batch,
/// with dropout masks fixed by `seed`.
fn combined(net: &Network, x: &Tensor, y: &LabelBatch, alpha: f64, seed: u64) -> Result<(f64, ParamGrads)> {
    let mut pass = net.forward(x, Mode::Train, seed)?;
    let main = net.graph().main_head().node.clone();
    let (lm, gm) = softmax_xent(pass.head(&main).expect("main head ran"), y)?;
    let mut grads = HeadGrads::from([(main, gm)]);
    let mut la = 0.0;
    for h in net.graph().aux_heads() {
        let (l, g) = softmax_xent(pass.head(&h.node).expect("aux heads run in train mode"), y)?;
        la += l;
        grads.insert(h.node.clone(), g.scale(alpha));
    }
    let loss = combined_loss(lm, la, alpha)?;
    let param_grads = net.backward(&mut pass, &grads)?;
    Ok((loss, param_grads))
}

type ParamGrads = crate::graph::ParamMap;

/// Samples per layer in [`graph_checks`], besides the largest-gradient entry.
const SAMPLES_PER_LAYER: usize = 4;

/// Checks the gradient of the two-head weighted loss of a small residual
/// network with an auxiliary branch against finite differences, for a few
/// sampled weights of every trainable layer (one row per layer).
pub fn graph_checks(seed: u64, alpha: f64) -> Result<Vec<CheckRow>> {
    let arch = ArchConfig {
        input_shape: [3, 32, 32],
        ..ArchConfig::desk(3)
    };
    let graph = insert_residual_connections(&build_cnds(&arch)?, &ResidualOptions::from(&arch))?;
    let mut net = Network::init(graph, Init::He { bias_std: 0.1 }, derive_seed(seed, "net"))?;
    let x = Tensor::gaussian(&[2, 3, 32, 32], 1.0, derive_seed(seed, "x"))?;
    let y = LabelBatch::new(vec![0, 2], 3)?;
    let drop_seed = derive_seed(seed, "dropout");

    // He-initialized logits grow with depth; a true-class probability under
    // the log floor would make the loss locally flat. Rescale each head so
    // its largest logit is about 3.
    let pass = net.forward(&x, Mode::Train, drop_seed)?;
    let scales: Vec<(String, f64)> = pass
        .logits()
        .iter()
        .map(|(id, z)| (id.clone(), 3.0 / z.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()))))
        .collect();
    for (id, s) in scales {
        let p = net.param_mut(&id).expect("heads are trainable");
        *p = LayerParams::new(p.weights.scale(s), p.bias.scale(s))?;
    }
    let (_, analytic) = combined(&net, &x, &y, alpha, drop_seed)?;

    let mut rows = vec![];
    let ids: Vec<String> = net.params().keys().cloned().collect();
    for id in ids {
        let g = &analytic[&id].weights;
        let largest = g
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut rng = derived_stream(seed, &format!("sample/{id}"));
        let mut picks = vec![largest];
        picks.extend((0..SAMPLES_PER_LAYER).map(|_| rand::Rng::random_range(&mut rng, 0..g.len())));

        let mut a = vec![];
        let mut n = vec![];
        for &i in &picks {
            a.push(g.data()[i]);
            let orig = net.params()[&id].weights.data()[i];
            let eval = |v: f64, net: &mut Network| -> Result<f64> {
                net.param_mut(&id).unwrap().weights.data_mut()[i] = v;
                Ok(combined(net, &x, &y, alpha, drop_seed)?.0)
            };
            let up = eval(orig + FD_EPS, &mut net)?;
            let down = eval(orig - FD_EPS, &mut net)?;
            eval(orig, &mut net)?;
            n.push((up - down) / (2.0 * FD_EPS));
        }
        rows.push(CheckRow {
            name: format!("graph/{id}"),
            rel_err: relative_error(&a, &n),
        });
    }
    Ok(rows)
}

/// Layer rows followed by whole-network rows at `alpha = 0.3`.
pub fn run_all(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = layer_checks(seed)?;
    rows.extend(graph_checks(seed, 0.3)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_metric() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, -4.0], &[1.1, -4.0]) - 0.1 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn numeric_grad_of_a_quadratic() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_grad(&x, |t| t.data().iter().map(|v| v * v).sum());
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn every_layer_kind_passes() {
        let rows = layer_checks(1).unwrap();
        assert_eq!(rows.len(), 11);
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let n = Tensor::new(vec![2], vec![1.0, 2.001]).unwrap();
        assert!(!row("x", &a, &n).passed());
    }
}
