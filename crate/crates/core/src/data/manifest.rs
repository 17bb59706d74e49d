use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AugmentPolicy, Dataset, Normalization, Sample, Source, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balance {
    #[default]
    None,
    /// Oversample minority classes to parity; each copy is augmented
    /// independently at train time.
    Augment,
}

/// On-disk dataset description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub normalization: Normalization,
    #[serde(default)]
    pub balance: Balance,
    #[serde(default)]
    pub augment: AugmentPolicy,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

impl LoadReport {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scans `root/{train,val,test}/<class>/*`. Class names are the sorted union
/// of class folders over all splits; samples are in path order. Empty class
/// folders produce warnings and undecodable files land in `skipped`.
pub fn load_manifest(root: &Path) -> Result<LoadReport> {
    let mut warnings = Vec::new();
    let mut classes = BTreeSet::new();
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            warnings.push(format!("missing split directory {}", dir.display()));
            continue;
        }
        for p in sorted_entries(&dir)? {
            if p.is_dir() {
                classes.insert(dir_name(&p));
            }
        }
    }
    let class_names: Vec<String> = classes.into_iter().collect();
    if class_names.is_empty() {
        warnings.push(format!("no class directories under {}", root.display()));
    }

    let mut skipped = Vec::new();
    let mut load_split = |split: Split, warnings: &mut Vec<String>| -> Result<Dataset> {
        let mut samples = Vec::new();
        for (label, class) in class_names.iter().enumerate() {
            let dir = root.join(split.dir_name()).join(class);
            if !dir.is_dir() {
                continue;
            }
            let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()).collect();
            if files.is_empty() {
                warnings.push(format!("empty class directory {}", dir.display()));
            }
            for path in files {
                if image::image_dimensions(&path).is_err() {
                    skipped.push(path);
                    continue;
                }
                samples.push(Sample {
                    id: path.display().to_string(),
                    source: Source::Path(path),
                    label,
                });
            }
        }
        Dataset::new(samples, class_names.clone(), split)
    };
    let train = load_split(Split::Train, &mut warnings)?;
    let val = load_split(Split::Val, &mut warnings)?;
    let test = load_split(Split::Test, &mut warnings)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LoadReport {
        train,
        val,
        test,
        warnings,
        skipped,
    })
}

/// Plain text, one path per line.
pub fn write_skip_report(path: &Path, skipped: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for p in skipped {
        text.push_str(&p.display().to_string());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Per-channel pixel mean and standard deviation over every sample.
pub fn channel_statistics(ds: &Dataset) -> Result<Normalization> {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for s in &ds.samples {
        let img = s.load()?;
        for px in img.pixels().chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += img.width() * img.height();
    }
    if count == 0 {
        return Err(Error::Argument("cannot compute statistics of an empty dataset".into()));
    }
    let n = count as f64;
    let mut norm = Normalization {
        mean: [0.0; 3],
        std: [0.0; 3],
    };
    for c in 0..3 {
        let mean = sum[c] / n;
        norm.mean[c] = mean;
        norm.std[c] = (sq[c] / n - mean * mean).max(0.0).sqrt().max(1e-3);
    }
    Ok(norm)
}

/// Appends copies of minority-class samples, cycling in dataset order,
/// until every class matches the largest one.
pub fn balance_by_oversampling(ds: &Dataset) -> Dataset {
    let counts = ds.class_counts();
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut samples = ds.samples.clone();
    for (label, &have) in counts.iter().enumerate() {
        if have == 0 {
            continue;
        }
        let members: Vec<&Sample> = ds.samples.iter().filter(|s| s.label == label).collect();
        for i in 0..target - have {
            let src = members[i % have];
            samples.push(Sample {
                source: src.source.clone(),
                label,
                id: format!("{}#dup{}", src.id, i / have + 1),
            });
        }
    }
    Dataset {
        samples,
        class_names: ds.class_names.clone(),
        split: ds.split,
    }
}

impl Manifest {
    /// Scans `root` and computes normalization from the train split, with
    /// the synthetic fallback when the train split is empty.
    pub fn from_root(root: &Path, image_size: usize) -> Result<(Self, LoadReport)> {
        let report = load_manifest(root)?;
        let normalization = if report.train.is_empty() {
            Normalization::synthetic()
        } else {
            channel_statistics(&report.train)?
        };
        let manifest = Self {
            root: root.to_path_buf(),
            class_names: report.train.class_names.clone(),
            image_size,
            normalization,
            balance: Balance::None,
            augment: AugmentPolicy::default(),
        };
        Ok((manifest, report))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.root.is_relative() {
            if let Some(dir) = path.parent() {
                m.root = dir.join(&m.root);
            }
        }
        m.normalization.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Loads the three splits, checking the class list against the
    /// manifest and applying the balance option to the train split.
    pub fn datasets(&self) -> Result<LoadReport> {
        let mut report = load_manifest(&self.root)?;
        if report.train.class_names != self.class_names {
            return Err(Error::Config(format!(
                "classes on disk {:?} differ from manifest {:?}",
                report.train.class_names, self.class_names
            )));
        }
        if self.balance == Balance::Augment {
            report.train = balance_by_oversampling(&report.train);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    fn write_tree(root: &Path) {
        for (split, class, n) in [("train", "aca", 2), ("train", "benign", 2), ("train", "scc", 2)] {
            let dir = root.join(split).join(class);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..n {
                Image::filled(32, 32, 0.1 * (i + 1) as f32)
                    .save_png(&dir.join(format!("{i}.png")))
                    .unwrap();
            }
        }
    }

    #[test]
    fn enumerates_tree() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path());
        let r = load_manifest(dir.path()).unwrap();
        assert_eq!(r.train.len(), 6);
        assert_eq!(r.train.class_names, vec!["aca", "benign", "scc"]);
        let again = load_manifest(dir.path()).unwrap();
        let ids = |d: &Dataset| d.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&r.train), ids(&again.train));
    }

    #[test]
    fn empty_root_warns() {
        let dir = tempfile::tempdir().unwrap();
        let r = load_manifest(dir.path()).unwrap();
        assert!(r.train.is_empty());
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn unreadable_file_is_skipped_and_empty_class_warns() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path());
        let bad = dir.path().join("train/aca/broken.png");
        fs::write(&bad, b"not an image").unwrap();
        fs::create_dir_all(dir.path().join("train/empty")).unwrap();
        let r = load_manifest(dir.path()).unwrap();
        assert_eq!(r.skipped, vec![bad]);
        assert_eq!(r.train.len(), 6);
        assert!(r.warnings.iter().any(|w| w.contains("empty class directory")));
    }

    #[test]
    fn oversampling_reaches_parity() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path());
        let extra = dir.path().join("train/aca");
        for i in 2..5 {
            Image::filled(32, 32, 0.5).save_png(&extra.join(format!("{i}.png"))).unwrap();
        }
        let r = load_manifest(dir.path()).unwrap();
        assert_eq!(r.train.class_counts(), vec![5, 2, 2]);
        assert_eq!(balance_by_oversampling(&r.train).class_counts(), vec![5, 5, 5]);
    }

    #[test]
    fn manifest_toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path());
        let (m, _) = Manifest::from_root(dir.path(), 32).unwrap();
        assert!((m.normalization.mean[0] - 0.15).abs() < 0.01);
        let path = dir.path().join("manifest.toml");
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }
}
