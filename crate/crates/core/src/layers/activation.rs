use super::{check_grad_shape, LayerCache, Stash};
use crate::error::Result;
use crate::tensor::Tensor;

/// `max(0, x)` elementwise.
pub fn relu_forward(input: &Tensor, cache: &mut LayerCache) -> Result<Tensor> {
    let active: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    let out = input
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    cache.put(Stash::Relu {
        shape: input.shape().to_vec(),
        active,
    });
    Tensor::new(input.shape().to_vec(), out)
}

/// Passes the gradient where the input was strictly positive (0 at x = 0).
pub fn relu_backward(grad_out: &Tensor, cache: &mut LayerCache) -> Result<Tensor> {
    let Stash::Relu { shape, active } = cache.take("relu")? else {
        unreachable!()
    };
    check_grad_shape("relu", grad_out, &shape)?;
    let g = grad_out
        .data()
        .iter()
        .zip(&active)
        .map(|(&g, &a)| if a { g } else { 0.0 })
        .collect();
    Tensor::new(shape, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{assert_grad_close, numeric_grad};

    #[test]
    fn negative_input_is_zeroed() {
        let x = Tensor::new(vec![4], vec![-1., -0.5, -3., 0.]).unwrap();
        assert_eq!(relu_forward(&x, &mut LayerCache::new()).unwrap().data(), &[0.; 4]);
    }

    #[test]
    fn positive_input_is_identity() {
        let x = Tensor::new(vec![3], vec![1., 0.5, 3.]).unwrap();
        let mut cache = LayerCache::new();
        assert_eq!(relu_forward(&x, &mut cache).unwrap(), x);
        let g = Tensor::new(vec![3], vec![0.1, -2., 7.]).unwrap();
        assert_eq!(relu_backward(&g, &mut cache).unwrap(), g);
    }

    #[test]
    fn finite_differences_away_from_kink() {
        // keep every coordinate at least 0.1 away from 0
        let x = Tensor::gaussian(&[3, 20], 1.0, 41)
            .unwrap()
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
            .collect::<Vec<_>>();
        let x = Tensor::new(vec![3, 20], x).unwrap();
        let probe = Tensor::gaussian(&[3, 20], 1.0, 42).unwrap();
        let loss = |t: &Tensor| -> f64 {
            let y = relu_forward(t, &mut LayerCache::new()).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut cache = LayerCache::new();
        relu_forward(&x, &mut cache).unwrap();
        let g = relu_backward(&probe, &mut cache).unwrap();
        assert_grad_close(&g, &numeric_grad(&x, loss), 1e-4);
    }
}
