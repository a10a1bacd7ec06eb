use rand::Rng as _;

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A square crop window, optionally mirrored left-right afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => bail!(Crop, "image must be [C, H, W], got {s:?}"),
    }
}

/// Extracts `spec` from a `[C, H, W]` image.
pub fn crop(image: &Tensor, spec: CropSpec) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    let s = spec.size;
    if s == 0 || spec.top + s > h || spec.left + s > w {
        bail!(
            Crop,
            "crop {s}x{s} at ({}, {}) does not fit a {h}x{w} image",
            spec.top,
            spec.left
        );
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        for y in 0..s {
            let row = (ch * h + spec.top + y) * w + spec.left;
            let row = &src[row..row + s];
            if spec.flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![c, s, s], out)
}

/// Mirrors a `[C, H, W]` image left-right.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(image)?;
    let mut out = image.clone();
    if w > 0 {
        for row in out.data_mut().chunks_mut(w) {
            row.reverse();
        }
    }
    Ok(out)
}

fn check_fits(image: &Tensor, size: usize) -> Result<(usize, usize)> {
    let (_, h, w) = dims(image)?;
    if size == 0 || size > h || size > w {
        bail!(Crop, "crop size {size} exceeds image {h}x{w}");
    }
    Ok((h, w))
}

/// Training augmentation: a uniformly placed `size` crop, mirrored with
/// probability 1/2.
pub fn augment_train(image: &Tensor, size: usize, rng: &mut Rng) -> Result<Tensor> {
    let (h, w) = check_fits(image, size)?;
    let spec = CropSpec {
        top: rng.random_range(0..=h - size),
        left: rng.random_range(0..=w - size),
        size,
        flip: rng.random_bool(0.5),
    };
    crop(image, spec)
}

/// The single centered crop used for plain evaluation.
pub fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w) = check_fits(image, size)?;
    crop(
        image,
        CropSpec { top: (h - size) / 2, left: (w - size) / 2, size, flip: false },
    )
}

/// The ten evaluation crops, in a fixed order: top-left, top-right,
/// bottom-left, bottom-right, center, then the mirror of each in the same
/// order.
pub fn ten_crop(image: &Tensor, size: usize) -> Result<Vec<Tensor>> {
    let (h, w) = check_fits(image, size)?;
    let (b, r) = (h - size, w - size);
    let origins = [(0, 0), (0, r), (b, 0), (b, r), (b / 2, r / 2)];
    let mut out = Vec::with_capacity(10);
    for flip in [false, true] {
        for &(top, left) in &origins {
            out.push(crop(image, CropSpec { top, left, size, flip })?);
        }
    }
    Ok(out)
}
