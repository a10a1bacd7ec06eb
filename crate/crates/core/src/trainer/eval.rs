use serde::{Deserialize, Serialize};

use crate::data::{center_crop, stack, ten_crop, Dataset};
use crate::error::{bail, Result};
use crate::graph::Network;
use crate::layers::Mode;
use crate::supervision::softmax_prob;
use crate::tensor::Tensor;

/// How test images are cropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// One centered crop.
    #[default]
    Center,
    /// The four corners, the center, and their mirrors; class probabilities
    /// are averaged over the ten.
    TenCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Anything that maps a `[N, C, H, W]` batch to `[N, K]` class
/// probabilities.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Predictor for Network {
    fn num_classes(&self) -> usize {
        self.graph().num_classes
    }

    /// Test-mode forward pass; auxiliary heads are skipped.
    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let head = self.graph().main_head().node.clone();
        let pass = self.forward(batch, Mode::Test, 0)?;
        let logits = pass.head(&head).expect("main head always runs");
        softmax_prob(logits)
    }
}

/// Zero-based rank of `label` in `probs` when classes are sorted by
/// descending probability with ties broken by lower index first.
pub fn rank_of(probs: &[f64], label: usize) -> usize {
    let p = probs[label];
    probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count()
}

/// Top-1 and top-5 accuracy of `model` on `data`, cropping to `crop`
/// pixels. Images are processed `batch_size` at a time.
pub fn evaluate(
    model: &impl Predictor,
    data: &Dataset,
    crop: usize,
    mode: EvalMode,
    batch_size: usize,
) -> Result<Accuracy> {
    if model.num_classes() != data.num_classes() {
        bail!(
            Config,
            "model predicts {} classes but the dataset has {}",
            model.num_classes(),
            data.num_classes()
        );
    }
    if data.is_empty() {
        bail!(Input, "cannot evaluate on an empty dataset");
    }
    let k = model.num_classes();
    let per_image = match mode {
        EvalMode::Center => 1,
        EvalMode::TenCrop => 10,
    };
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let chunk = batch_size.max(1);
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let mut crops = Vec::with_capacity((end - start) * per_image);
        for img in &data.images[start..end] {
            match mode {
                EvalMode::Center => crops.push(center_crop(img, crop)?),
                EvalMode::TenCrop => crops.extend(ten_crop(img, crop)?),
            }
        }
        let probs = model.predict(&stack(&crops)?)?;
        if probs.shape() != [crops.len(), k] {
            bail!(Shape, "predictor returned {:?}, expected [{}, {k}]", probs.shape(), crops.len());
        }
        for (i, &label) in data.labels[start..end].iter().enumerate() {
            let mut avg = vec![0.0; k];
            for c in 0..per_image {
                let row = &probs.data()[(i * per_image + c) * k..][..k];
                for (a, p) in avg.iter_mut().zip(row) {
                    *a += p;
                }
            }
            for a in &mut avg {
                *a /= per_image as f64;
            }
            let r = rank_of(&avg, label);
            hit1 += (r < 1) as usize;
            hit5 += (r < 5) as usize;
        }
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
    })
}
