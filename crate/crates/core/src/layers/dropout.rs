use rand::Rng;

use super::{check_grad_shape, LayerCache, Mode, Stash};
use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Inverted dropout: in train mode each unit is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Test mode is the
/// identity. The mask is drawn from a ChaCha8 stream seeded with `seed`.
pub fn dropout_forward(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    seed: u64,
    cache: &mut LayerCache,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        bail!(Param, "dropout rate must lie in [0, 1), got {rate}");
    }
    if mode == Mode::Test || rate == 0.0 {
        cache.put(Stash::Dropout {
            shape: input.shape().to_vec(),
            scale: None,
        });
        return Ok(input.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    let mut stream = rng::stream(seed);
    let scale: Vec<f64> = (0..input.len())
        .map(|_| if stream.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let out = input.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
    cache.put(Stash::Dropout {
        shape: input.shape().to_vec(),
        scale: Some(scale),
    });
    Tensor::new(input.shape().to_vec(), out)
}

pub fn dropout_backward(grad_out: &Tensor, cache: &mut LayerCache) -> Result<Tensor> {
    let Stash::Dropout { shape, scale } = cache.take("dropout")? else {
        unreachable!()
    };
    check_grad_shape("dropout", grad_out, &shape)?;
    match scale {
        None => Ok(grad_out.clone()),
        Some(scale) => Tensor::new(
            shape,
            grad_out.data().iter().zip(&scale).map(|(g, s)| g * s).collect(),
        ),
    }
}
