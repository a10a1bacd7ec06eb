use super::{check_grad_shape, nchw, LayerCache, Stash};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// `floor((extent - kernel) / stride) + 1`, or `None` when the window does
/// not fit once.
pub fn pool_output_extent(extent: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > extent {
        return None;
    }
    Some((extent - kernel) / stride + 1)
}

fn pool_shape(op: &str, input: &Tensor, kernel: usize, stride: usize) -> Result<[usize; 6]> {
    let (n, c, h, w) = nchw(op, input)?;
    if stride == 0 || kernel == 0 {
        bail!(Param, "{op}: kernel and stride must be >= 1");
    }
    let (Some(oh), Some(ow)) = (
        pool_output_extent(h, kernel, stride),
        pool_output_extent(w, kernel, stride),
    ) else {
        bail!(Shape, "{op}: {kernel}x{kernel} window does not fit {h}x{w} input");
    };
    Ok([n, c, h, w, oh, ow])
}

/// Per-window maximum. Ties go to the first position in row-major order.
pub fn maxpool_forward(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    cache: &mut LayerCache,
) -> Result<Tensor> {
    let [n, c, h, w, oh, ow] = pool_shape("maxpool", input, kernel, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kernel {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let out_shape = vec![n, c, oh, ow];
    cache.put(Stash::MaxPool {
        in_shape: input.shape().to_vec(),
        out_shape: out_shape.clone(),
        argmax,
    });
    Tensor::new(out_shape, out)
}

/// Routes each output gradient to the stored argmax position.
pub fn maxpool_backward(grad_out: &Tensor, cache: &mut LayerCache) -> Result<Tensor> {
    let Stash::MaxPool {
        in_shape,
        out_shape,
        argmax,
    } = cache.take("maxpool")?
    else {
        unreachable!()
    };
    check_grad_shape("maxpool", grad_out, &out_shape)?;
    let mut grad = Tensor::zeros(&in_shape)?;
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

/// Per-window mean.
pub fn avgpool_forward(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    cache: &mut LayerCache,
) -> Result<Tensor> {
    let [n, c, h, w, oh, ow] = pool_shape("avgpool", input, kernel, stride)?;
    let x = input.data();
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    acc += x[row..row + kernel].iter().sum::<f64>();
                }
                out.push(acc * norm);
            }
        }
    }
    let out_shape = vec![n, c, oh, ow];
    cache.put(Stash::AvgPool {
        in_shape: input.shape().to_vec(),
        out_shape: out_shape.clone(),
        kernel,
        stride,
    });
    Tensor::new(out_shape, out)
}

/// Spreads each output gradient uniformly (`/ k^2`) over its window.
pub fn avgpool_backward(grad_out: &Tensor, cache: &mut LayerCache) -> Result<Tensor> {
    let Stash::AvgPool {
        in_shape,
        out_shape,
        kernel,
        stride,
    } = cache.take("avgpool")?
    else {
        unreachable!()
    };
    check_grad_shape("avgpool", grad_out, &out_shape)?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut grad = Tensor::zeros(&in_shape)?;
    let g = grad.data_mut();
    for (plane, go) in grad_out.data().chunks_exact(oh * ow).enumerate() {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let share = go[oy * ow + ox] * norm;
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for v in &mut g[row..row + kernel] {
                        *v += share;
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::layers::testutil::{assert_grad_close, numeric_grad};
    use proptest::prelude::*;

    /// Brute-force window scan returning `[N, C, OH, OW]` reductions.
    fn window_scan(x: &Tensor, k: usize, s: usize, reduce: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let [n, c, h, w] = x.shape().try_into().unwrap();
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut out = vec![];
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut win = vec![];
                        for ky in 0..k {
                            for kx in 0..k {
                                win.push(x.data()[((b * c + ch) * h + oy * s + ky) * w + ox * s + kx]);
                            }
                        }
                        out.push(reduce(&win));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn maxpool_constant_input_ties_go_to_first_index() {
        let x = Tensor::filled(&[1, 1, 4, 4], 3.0).unwrap();
        let mut cache = LayerCache::new();
        let y = maxpool_forward(&x, 2, 2, &mut cache).unwrap();
        assert_eq!(y.data(), &[3.0; 4]);
        let g = maxpool_backward(&Tensor::filled(&[1, 1, 2, 2], 1.0).unwrap(), &mut cache).unwrap();
        let expected = [
            1., 0., 1., 0., //
            0., 0., 0., 0., //
            1., 0., 1., 0., //
            0., 0., 0., 0.,
        ];
        assert_eq!(g.data(), &expected);
    }

    #[test]
    fn maxpool_ramp_matches_window_scan() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64).unwrap();
        let y = maxpool_forward(&x, 2, 2, &mut LayerCache::new()).unwrap();
        let oracle = window_scan(&x, 2, 2, |w| w.iter().cloned().fold(f64::MIN, f64::max));
        assert_eq!(y.data(), oracle.as_slice());
        assert_eq!(y.data(), &[5., 7., 13., 15.]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let x = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(maxpool_forward(&x, 4, 1, &mut LayerCache::new()), Err(Error::Shape(_))));
        assert!(matches!(avgpool_forward(&x, 5, 2, &mut LayerCache::new()), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_finite_differences() {
        // Gaussian draws are tie-free with probability one.
        let x = Tensor::gaussian(&[2, 2, 7, 7], 1.0, 31).unwrap();
        let probe = Tensor::gaussian(&[2, 2, 3, 3], 1.0, 32).unwrap();
        let loss = |t: &Tensor| -> f64 {
            let y = maxpool_forward(t, 3, 2, &mut LayerCache::new()).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut cache = LayerCache::new();
        maxpool_forward(&x, 3, 2, &mut cache).unwrap();
        let g = maxpool_backward(&probe, &mut cache).unwrap();
        assert_grad_close(&g, &numeric_grad(&x, loss), 1e-4);
    }

    #[test]
    fn avgpool_constant_input() {
        let x = Tensor::filled(&[1, 2, 9, 9], -1.25).unwrap();
        let y = avgpool_forward(&x, 5, 2, &mut LayerCache::new()).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| (v + 1.25).abs() < 1e-15));
    }

    #[test]
    fn avgpool_matches_window_scan() {
        let x = Tensor::gaussian(&[1, 2, 13, 13], 1.0, 33).unwrap();
        let y = avgpool_forward(&x, 5, 2, &mut LayerCache::new()).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 5]);
        let oracle = window_scan(&x, 5, 2, |w| w.iter().sum::<f64>() / w.len() as f64);
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn avgpool_finite_differences() {
        let x = Tensor::gaussian(&[2, 2, 13, 13], 1.0, 34).unwrap();
        let probe = Tensor::gaussian(&[2, 2, 5, 5], 1.0, 35).unwrap();
        let loss = |t: &Tensor| -> f64 {
            let y = avgpool_forward(t, 5, 2, &mut LayerCache::new()).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut cache = LayerCache::new();
        avgpool_forward(&x, 5, 2, &mut cache).unwrap();
        let g = avgpool_backward(&probe, &mut cache).unwrap();
        assert_grad_close(&g, &numeric_grad(&x, loss), 1e-4);
    }

    proptest! {
        #[test]
        fn output_extent_formula(h in 1usize..40, w in 1usize..40, k in 1usize..8, s in 1usize..5) {
            prop_assume!(k <= h && k <= w);
            let x = Tensor::zeros(&[1, 1, h, w]).unwrap();
            let y = maxpool_forward(&x, k, s, &mut LayerCache::new()).unwrap();
            prop_assert_eq!(y.shape(), &[1, 1, (h - k) / s + 1, (w - k) / s + 1]);
            let y = avgpool_forward(&x, k, s, &mut LayerCache::new()).unwrap();
            prop_assert_eq!(y.shape(), &[1, 1, (h - k) / s + 1, (w - k) / s + 1]);
        }
    }
}
