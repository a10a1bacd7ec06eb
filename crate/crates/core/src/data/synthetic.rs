//! A small procedurally generated 3-class image dataset for desk-scale runs:
//! horizontal stripes, vertical stripes and a bright disc, each with a random
//! phase or position, a random global tint and per-pixel noise. Pixel values
//! live on the 0..255 scale of natural images.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::manifest::{Manifest, Record};
use crate::error::{bail, Result};
use crate::rng::{derived_stream, Rng};
use crate::tensor::Tensor;

pub const CLASSES: [&str; 3] = ["horizontal", "vertical", "disc"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Stored side length; training crops are taken from inside it.
    pub size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_per_class: 200,
            test_per_class: 100,
            size: 40,
            noise_std: 20.0,
            seed: 0,
        }
    }
}

/// Renders one `[3, size, size]` image of class `label`.
pub fn render(label: usize, size: usize, noise_std: f64, rng: &mut Rng) -> Tensor {
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.3));
    let base = rng.random_range(90.0..140.0);
    let amp = rng.random_range(50.0..80.0);
    let period = rng.random_range(6.0..12.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cy, cx) = (rng.random_range(0.25..0.75) * size as f64, rng.random_range(0.25..0.75) * size as f64);
    let radius = rng.random_range(0.15..0.3) * size as f64;
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("finite std");

    let mut data = Vec::with_capacity(3 * size * size);
    let mut plane = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64, x as f64);
            let v = match label {
                0 => base + amp * (2.0 * PI * yf / period + phase).sin(),
                1 => base + amp * (2.0 * PI * xf / period + phase).sin(),
                _ => {
                    let d = ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt();
                    if d < radius {
                        base + amp
                    } else {
                        base - 0.3 * amp
                    }
                }
            };
            plane.push(v);
        }
    }
    for t in tint {
        for &v in &plane {
            let n = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((v * t + n).clamp(0.0, 255.0));
        }
    }
    Tensor::new(vec![3, size, size], data).expect("shape matches data")
}

/// Writes `train.json` and `test.json` plus their image files under `dir`.
/// The mean pixel of the training split is stored in both manifests.
pub fn write_dataset(dir: &Path, cfg: &SyntheticConfig) -> Result<()> {
    if cfg.size == 0 || cfg.train_per_class == 0 {
        bail!(Config, "synthetic dataset needs a positive size and training count");
    }
    fs::create_dir_all(dir.join("images"))?;
    let mut means = [0.0; 3];
    let mut manifests = vec![];
    for (split, per_class) in [("train", cfg.train_per_class), ("test", cfg.test_per_class)] {
        let mut rng = derived_stream(cfg.seed, &format!("synthetic/{split}"));
        let mut records = vec![];
        let mut sums = [0.0; 3];
        for i in 0..per_class * CLASSES.len() {
            let label = i % CLASSES.len();
            let img = render(label, cfg.size, cfg.noise_std, &mut rng);
            let plane = cfg.size * cfg.size;
            for (c, s) in sums.iter_mut().enumerate() {
                *s += img.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            let file = format!("images/{split}_{i:05}.bin");
            fs::write(dir.join(&file), img.to_bytes())?;
            records.push(Record { file, label });
        }
        if split == "train" {
            let count = (records.len() * cfg.size * cfg.size) as f64;
            means = sums.map(|s| s / count);
        }
        manifests.push((split, records));
    }
    for (split, records) in manifests {
        let m = Manifest {
            classes: CLASSES.iter().map(|s| s.to_string()).collect(),
            mean: Some(means),
            height: Some(cfg.size),
            width: Some(cfg.size),
            records,
        };
        fs::write(dir.join(format!("{split}.json")), m.to_json())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, Dataset};
    use crate::rng::stream;

    #[test]
    fn written_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { train_per_class: 4, test_per_class: 2, size: 12, ..Default::default() };
        write_dataset(dir.path(), &cfg).unwrap();
        let train = load_manifest(dir.path().join("train.json")).unwrap();
        assert_eq!(train.records().len(), 12);
        assert_eq!(train.geometry(), (12, 12));
        let test = Dataset::load_split(dir.path(), "test", train.mean()).unwrap();
        assert_eq!(test.len(), 6);
        assert_eq!(test.labels, [0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn generation_is_seeded() {
        let a = render(1, 8, 5.0, &mut stream(3));
        let b = render(1, 8, 5.0, &mut stream(3));
        let c = render(1, 8, 5.0, &mut stream(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stripes_vary_along_one_axis_only() {
        let img = render(0, 16, 0.0, &mut stream(9));
        // noise-free horizontal stripes: every row is constant
        for row in img.data().chunks(16) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
        let img = render(1, 16, 0.0, &mut stream(9));
        for c in 0..3 {
            for x in 0..16 {
                let col: Vec<f64> = (0..16).map(|y| img.data()[(c * 16 + y) * 16 + x]).collect();
                assert!(col.iter().all(|&v| v == col[0]));
            }
        }
    }
}
