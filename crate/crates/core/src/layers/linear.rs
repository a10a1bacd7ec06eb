use super::{check_grad_shape, LayerCache, LayerParams, Stash};
use crate::error::{bail, Result};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// `out = x W^T + b` with `x` flattened to `[N, D]` and `W` of shape `[O, D]`.
pub fn fc_forward(input: &Tensor, params: &LayerParams, cache: &mut LayerCache) -> Result<Tensor> {
    let n = input.shape()[0];
    let d = input.len() / n;
    let ws = params.weights.shape();
    if ws.len() != 2 || ws[1] != d {
        bail!(
            Shape,
            "fc weights {ws:?} do not accept flattened input of width {d} (input {:?})",
            input.shape()
        );
    }
    let o = ws[0];
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(params.bias.data());
    }
    gemm_nt(input.data(), params.weights.data(), &mut out, n, d, o);
    cache.put(Stash::Fc {
        input: input.clone(),
        in_shape: input.shape().to_vec(),
    });
    Tensor::new(vec![n, o], out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`; `grad_input` has the
/// original (unflattened) input shape.
pub fn fc_backward(
    grad_out: &Tensor,
    params: &LayerParams,
    cache: &mut LayerCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let Stash::Fc { input, in_shape } = cache.take("fc")? else {
        unreachable!()
    };
    let n = in_shape[0];
    let d = input.len() / n;
    let o = params.out_features();
    check_grad_shape("fc", grad_out, &[n, o])?;

    let mut grad_in = vec![0.0; n * d];
    crate::tensor::gemm(grad_out.data(), params.weights.data(), &mut grad_in, n, o, d);
    let mut grad_w = vec![0.0; o * d];
    gemm_tn(grad_out.data(), input.data(), &mut grad_w, o, n, d);
    let mut grad_b = vec![0.0; o];
    for row in grad_out.data().chunks_exact(o) {
        for (b, g) in grad_b.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((
        Tensor::new(in_shape, grad_in)?,
        Tensor::new(vec![o, d], grad_w)?,
        Tensor::new(vec![o], grad_b)?,
    ))
}
