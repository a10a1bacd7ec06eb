use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Image path, relative to the manifest's directory.
    pub file: String,
    pub label: usize,
}

/// The on-disk JSON index of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f64; 3]>,
    /// Declared stored geometry; inferred from the first image when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub records: Vec<Record>,
}

impl Manifest {
    /// Parses and checks everything that does not need the filesystem.
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k == 0 {
            bail!(Manifest, "manifest lists no classes");
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.label >= k {
                bail!(
                    Manifest,
                    "record {i} ({}) has label {} but only {k} classes",
                    r.file,
                    r.label
                );
            }
        }
        if let Some(m) = self.mean {
            if m.iter().any(|v| !v.is_finite()) {
                bail!(Manifest, "mean pixel {m:?} is not finite");
            }
        }
        if self.height == Some(0) || self.width == Some(0) {
            bail!(Manifest, "declared geometry has a zero extent");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail")
    }
}

/// A validated manifest bound to its location on disk.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    split: String,
    manifest: Manifest,
    mean: [f64; 3],
    geometry: (usize, usize),
}

impl DatasetManifest {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn records(&self) -> &[Record] {
        &self.manifest.records
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mean
    }

    /// Stored `(H, W)`.
    pub fn geometry(&self) -> (usize, usize) {
        self.geometry
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Reads one raw image and checks it against the declared geometry.
    pub fn read_image(&self, r: &Record) -> Result<Tensor> {
        let t = read_image_file(&self.root.join(&r.file))?;
        let (h, w) = self.geometry;
        if t.shape() != [3, h, w] {
            bail!(Decode, "{}: shape {:?}, expected [3, {h}, {w}]", r.file, t.shape());
        }
        Ok(t)
    }
}

fn read_image_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    Tensor::from_bytes(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

/// Loads and validates a manifest. Every record must exist. When the
/// manifest carries no mean pixel, per-channel means are computed over its
/// records and written back into the file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut manifest = Manifest::parse(&text)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for (i, r) in manifest.records.iter().enumerate() {
        if !root.join(&r.file).is_file() {
            bail!(Manifest, "record {i}: file {} does not exist", r.file);
        }
    }
    let geometry = match (manifest.height, manifest.width, manifest.records.first()) {
        (Some(h), Some(w), _) => (h, w),
        (_, _, Some(r)) => {
            let t = read_image_file(&root.join(&r.file))?;
            match *t.shape() {
                [3, h, w] => (h, w),
                ref s => bail!(Decode, "{}: shape {s:?} is not [3, H, W]", r.file),
            }
        }
        (_, _, None) => bail!(Manifest, "manifest has no records and no declared geometry"),
    };

    let mut dm = DatasetManifest {
        root,
        split,
        manifest: manifest.clone(),
        mean: [0.0; 3],
        geometry,
    };
    dm.mean = match manifest.mean {
        Some(m) => m,
        None => {
            let m = channel_means(&dm)?;
            manifest.mean = Some(m);
            fs::write(path, manifest.to_json())?;
            dm.manifest = manifest;
            m
        }
    };
    Ok(dm)
}

/// Per-channel mean over every pixel of every record.
fn channel_means(dm: &DatasetManifest) -> Result<[f64; 3]> {
    if dm.records().is_empty() {
        bail!(Manifest, "cannot compute a mean over an empty split");
    }
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for r in dm.records() {
        let t = dm.read_image(r)?;
        let plane = t.len() / 3;
        for (c, s) in sums.iter_mut().enumerate() {
            *s += t.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    Ok(sums.map(|s| s / count as f64))
}
