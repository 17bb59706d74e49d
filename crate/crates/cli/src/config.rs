//! Run configuration: file values, then flag overrides, echoed as `resolved.cfg`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use resnetplus::data::{synth_splits, AugmentPolicy, Dataset, LoadReport, Manifest, Normalization, Preprocessor};
use resnetplus::model::ModelConfig;
use resnetplus::trainer::TrainConfig;
use resnetplus::Error;

pub const RESOLVED_NAME: &str = "resolved.cfg";
pub const SYNTH_IMAGE_SIZE: usize = 32;

/// `K` classes and `N` training samples in total; validation and test
/// splits hold `N/2` each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SynthSpec {
    pub classes: usize,
    pub train_total: usize,
}

impl std::str::FromStr for SynthSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (k, n) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected KxN (classes x training samples), got {s:?}"))?;
        let classes: usize = k.trim().parse().map_err(|_| format!("bad class count in {s:?}"))?;
        let train_total: usize = n.trim().parse().map_err(|_| format!("bad sample count in {s:?}"))?;
        if classes < 2 || train_total < classes {
            return Err(format!("{s:?}: need at least 2 classes and one sample per class"));
        }
        Ok(Self { classes, train_total })
    }
}

impl TryFrom<String> for SynthSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<SynthSpec> for String {
    fn from(s: SynthSpec) -> String {
        format!("{}x{}", s.classes, s.train_total)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SynthSpec>,
    /// Seed of the synthetic generator, independent of the training seed.
    pub seed: u64,
    /// Overrides the manifest's size; synthetic data defaults to 32.
    pub image_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> resnetplus::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative data paths are taken relative to the config file.
        if let (Some(m), Some(dir)) = (cfg.data.manifest.as_mut(), path.parent()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save_resolved(&self, dir: &Path) -> resnetplus::Result<PathBuf> {
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn has_data(&self) -> bool {
        self.data.manifest.is_some() || self.data.synthetic.is_some()
    }

    pub fn validate(&self) -> resnetplus::Result<()> {
        if self.data.manifest.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Argument("give either a manifest or --synthetic, not both".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

/// Loaded splits plus the preprocessing that goes with them.
pub struct Data {
    pub splits: LoadReport,
    pub pre: Preprocessor,
}

impl Data {
    pub fn class_names(&self) -> &[String] {
        &self.splits.train.class_names
    }

    pub fn test(&self) -> &Dataset {
        &self.splits.test
    }
}

pub fn load_data(cfg: &DataConfig) -> resnetplus::Result<Data> {
    if let Some(spec) = cfg.synthetic {
        let size = cfg.image_size.unwrap_or(SYNTH_IMAGE_SIZE);
        let s = synth_splits(spec.classes, spec.train_total, size, cfg.seed)?;
        let pre = Preprocessor::new(size, Normalization::synthetic(), AugmentPolicy::synthetic())?;
        let splits = LoadReport {
            train: s.train,
            val: s.val,
            test: s.test,
            warnings: Vec::new(),
            skipped: Vec::new(),
        };
        return Ok(Data { splits, pre });
    }
    let path = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Argument("no data source: give --manifest or --synthetic".into()))?;
    let manifest = Manifest::load(path)?;
    let size = cfg.image_size.unwrap_or(manifest.image_size);
    let splits = manifest.datasets()?;
    let pre = Preprocessor::new(size, manifest.normalization, manifest.augment.clone())?;
    Ok(Data { splits, pre })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Resnet50,
    Resnet50plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Weights {
    Raw,
    Ema,
}

/// Flags shared by `train` and `ablate`. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Run configuration (TOML: sections data, model, train).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset manifest written by `synth` or by hand.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// In-memory synthetic data, K classes with N training samples.
    #[arg(long, value_name = "KxN")]
    pub synthetic: Option<SynthSpec>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Start from this architecture before applying flag overrides.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub cbam: Option<bool>,
    #[arg(long)]
    pub sco: Option<bool>,
    #[arg(long)]
    pub replace_stem: Option<bool>,
    #[arg(long)]
    pub modify_shortcut: Option<bool>,
    #[arg(long)]
    pub replace_maxpool: Option<bool>,
    #[arg(long)]
    pub dropout: Option<f64>,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    /// Weights used for model selection and reporting.
    #[arg(long, value_enum)]
    pub select: Option<Weights>,
}

impl RunArgs {
    pub fn any_source(&self) -> bool {
        self.config.is_some() || self.manifest.is_some() || self.synthetic.is_some()
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> resnetplus::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.manifest {
            cfg.data.manifest = Some(m.clone());
            cfg.data.synthetic = None;
        }
        if let Some(s) = self.synthetic {
            cfg.data.synthetic = Some(s);
            cfg.data.manifest = None;
        }
        set(&mut cfg.data.seed, self.data_seed);
        if self.image_size.is_some() {
            cfg.data.image_size = self.image_size;
        }
        set(&mut cfg.out_dir, self.out.clone());

        if let Some(arch) = self.arch {
            let keep = cfg.model.clone();
            cfg.model = match arch {
                Arch::Resnet50 => ModelConfig::resnet50(keep.num_classes),
                Arch::Resnet50plus => ModelConfig::resnet50_plus(keep.num_classes),
            };
            cfg.model.width_mult = keep.width_mult;
            cfg.model.depth = keep.depth;
            cfg.model.dropout_rate = keep.dropout_rate;
        }
        let m = &mut cfg.model;
        set(&mut m.width_mult, self.width);
        set(&mut m.depth, self.depth);
        set(&mut m.cbam, self.cbam);
        set(&mut m.sco, self.sco);
        set(&mut m.replace_stem, self.replace_stem);
        set(&mut m.modify_shortcut, self.modify_shortcut);
        set(&mut m.replace_maxpool, self.replace_maxpool);
        set(&mut m.dropout_rate, self.dropout);

        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr0, self.lr);
        set(&mut t.seed, self.seed);
        set(&mut t.ema_decay, self.ema_decay);
        set(&mut t.eval_with_ema, self.select.map(|w| w == Weights::Ema));
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
