//! Dataset ingestion, augmentation, preprocessing and seeded batching.

mod augment;
mod batch;
mod image;
mod manifest;
mod preprocess;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use augment::{AugmentPolicy, Toggle};
pub use batch::{derive_rng, epoch_order, Batch, BatchIter};
pub use image::Image;
pub use manifest::{
    balance_by_oversampling, channel_statistics, load_manifest, write_skip_report, Balance, LoadReport, Manifest,
};
pub use preprocess::{Preprocessor, EVAL_RESIZE_RATIO};
pub use synth::{synth_dataset, synth_image, synth_splits, SynthSplits};

use crate::error::{Error, Result};

/// Per-channel normalization `(x - mean_c) / std_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Fixed fallback used for synthetic data.
    pub fn synthetic() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone)]
pub enum Source {
    Path(PathBuf),
    Inline(Arc<Image>),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub source: Source,
    pub label: usize,
    /// File path, or a stable synthetic identifier.
    pub id: String,
}

impl Sample {
    pub fn load(&self) -> Result<Arc<Image>> {
        match &self.source {
            Source::Inline(img) => Ok(Arc::clone(img)),
            Source::Path(p) => Image::open(p).map(Arc::new),
        }
    }

    /// Path used in error messages.
    pub fn origin(&self) -> &Path {
        match &self.source {
            Source::Path(p) => p,
            Source::Inline(_) => Path::new(&self.id),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let ds = Self {
            samples,
            class_names,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.samples.iter().find(|s| s.label >= self.class_names.len()) {
            return Err(Error::Argument(format!(
                "sample {} has label {} but only {} classes",
                s.id,
                s.label,
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}
