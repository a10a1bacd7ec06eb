//! Dataset manifests, mean-pixel preprocessing, crop/flip augmentation and
//! the 10-crop evaluation transform.
//!
//! Images are stored pre-decoded as `[3, H, W]` tensors in the binary tensor
//! format; a JSON manifest indexes them:
//!
//! ```json
//! {"classes": ["a", "b"], "mean": [m_r, m_g, m_b],
//!  "records": [{"file": "img/0.bin", "label": 0}]}
//! ```

mod augment;
mod manifest;
pub mod synthetic;

pub use augment::{augment_train, center_crop, crop, flip_horizontal, ten_crop, CropSpec};
pub use manifest::{load_manifest, DatasetManifest, Manifest, Record};

use std::path::Path;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Subtracts the per-channel mean from a `[3, H, W]` image. Not idempotent:
/// applying it twice shifts by the mean twice.
pub fn preprocess(image: &Tensor, mean: &[f64; 3]) -> Result<Tensor> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        ref s => bail!(Decode, "image must be [3, H, W], got {s:?}"),
    };
    if c != 3 {
        bail!(Decode, "image has {c} channels, expected 3");
    }
    let plane = h * w;
    let mut out = image.clone();
    for (ch, m) in mean.iter().enumerate() {
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v -= m;
        }
    }
    Ok(out)
}

/// A split held in memory as preprocessed `[3, H, W]` tensors.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub mean: [f64; 3],
}

impl Dataset {
    /// Loads and preprocesses every record of `manifest`, subtracting `mean`
    /// (normally the training split's mean).
    pub fn load(manifest: &DatasetManifest, mean: [f64; 3]) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.records().len());
        for r in manifest.records() {
            let raw = manifest.read_image(r)?;
            images.push(preprocess(&raw, &mean)?);
        }
        Ok(Dataset {
            images,
            labels: manifest.records().iter().map(|r| r.label).collect(),
            classes: manifest.classes().to_vec(),
            mean,
        })
    }

    /// Loads the split named `split` from `dir/<split>.json`.
    pub fn load_split(dir: &Path, split: &str, mean: [f64; 3]) -> Result<Self> {
        Self::load(&load_manifest(dir.join(format!("{split}.json")))?, mean)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Stored `(H, W)` of the images.
    pub fn geometry(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[1], t.shape()[2]))
    }
}

/// Stacks equally shaped `[C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let Some(first) = items.first() else {
        bail!(Shape, "cannot stack an empty list");
    };
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            bail!(Shape, "cannot stack {:?} with {:?}", t.shape(), first.shape());
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}
