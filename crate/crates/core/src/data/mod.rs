//! Dataset on disk: `<root>/images/*.ppm`, `<root>/labels/*.txt` with the
//! same stem, and a seeded split manifest `<root>/split_<seed>.txt`.

pub mod labels;
pub mod letterbox;
pub mod ppm;
pub mod split;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use labels::LabelRecord;
pub use letterbox::{hflip, letterbox, Letterbox};
pub use split::Split;

#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub stem: String,
    pub image: Tensor<f32>,
    pub labels: Vec<LabelRecord>,
    pub source: PathBuf,
    pub split: Split,
}

/// Index of a dataset; samples are decoded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub nc: usize,
    pub entries: Vec<(String, Split)>,
}

impl Dataset {
    /// Lists images, splits them with `seed` and writes the manifest.
    pub fn open(root: &Path, nc: usize, seed: u64) -> Result<Self> {
        let dir = root.join("images");
        let listing = std::fs::read_dir(&dir).map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?;
        let mut stems = Vec::new();
        for entry in listing {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "ppm") {
                if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                    stems.push(s.to_string());
                }
            }
        }
        stems.sort();
        if stems.is_empty() {
            return Err(Error::Config(format!("no .ppm images under {}", dir.display())));
        }
        let tags = split::split_tags(stems.len(), seed)?;
        split::write_manifest(&split::manifest_path(root, seed), &stems, &tags)?;
        Ok(Self {
            root: root.to_path_buf(),
            nc,
            entries: stems.into_iter().zip(tags).collect(),
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].1 == split).collect()
    }

    /// Decodes sample `i`. A missing label file means an image without objects.
    pub fn load(&self, i: usize) -> Result<DatasetSample> {
        let (stem, split) = &self.entries[i];
        let source = self.root.join("images").join(format!("{stem}.ppm"));
        let image = ppm::read(&source)?;
        let label_path = self.root.join("labels").join(format!("{stem}.txt"));
        let labels = if label_path.exists() { labels::read(&label_path, self.nc)? } else { Vec::new() };
        Ok(DatasetSample {
            stem: stem.clone(),
            image,
            labels,
            source,
            split: *split,
        })
    }
}
