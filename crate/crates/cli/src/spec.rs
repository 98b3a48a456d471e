//! Run specification: a TOML file merged with command-line flags, flags
//! taking precedence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use thrifty::data::{self, ImageDataset};
use thrifty::metrics::SweepEntry;
use thrifty::model::ConvMode;
use thrifty::ops::activation::Activation;
use thrifty::planner::BudgetConvention;
use thrifty::train::{AlphaRegConfig, TrainConfig};
use thrifty::{Error, Result, ThriftyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    /// `train.rawt` and `test.rawt` in the raw-tensor format.
    Raw,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub dataset: Option<DatasetKind>,
    pub dir: Option<PathBuf>,
    /// Class count of a raw dataset.
    pub classes: Option<usize>,
    /// Keep only the first `n` training samples.
    pub train_subset: Option<usize>,
    /// Disable train-time augmentation.
    pub no_augment: Option<bool>,
}

pub struct Datasets {
    pub train: ImageDataset,
    pub test: ImageDataset,
}

impl DataSpec {
    /// Fails with a configuration error, before anything is read, when the
    /// dataset or its directory is missing.
    pub fn check(&self) -> Result<(DatasetKind, &Path)> {
        let kind = self
            .dataset
            .ok_or_else(|| Error::Config("no dataset given (--dataset)".into()))?;
        let dir = self
            .dir
            .as_deref()
            .ok_or_else(|| Error::Config("no data directory given (--data-dir)".into()))?;
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "data directory {} does not exist",
                dir.display()
            )));
        }
        if kind == DatasetKind::Raw && self.classes.is_none() {
            return Err(Error::Config("raw datasets need --classes".into()));
        }
        Ok((kind, dir))
    }

    pub fn load(&self) -> Result<Datasets> {
        let (kind, dir) = self.check()?;
        let (mut train, test) = match kind {
            DatasetKind::Cifar10 => data::load_cifar10(dir)?,
            DatasetKind::Cifar100 => data::load_cifar100(dir)?,
            DatasetKind::Raw => data::load_raw(dir, self.classes.expect("checked"))?,
        };
        if let Some(n) = self.train_subset {
            let idx: Vec<usize> = (0..n.min(train.len())).collect();
            train = train.subset(&idx);
        }
        if self.no_augment == Some(true) {
            train.augmentation = None;
        }
        Ok(Datasets { train, test })
    }
}

/// Everything a command needs, fully resolved before work starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub model: SweepEntry,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSpec,
    pub out: Option<PathBuf>,
}

impl RunSpec {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunSpec::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The architecture for images shaped like `train`'s.
    pub fn resolve_model(&self, train: &ImageDataset) -> Result<ThriftyConfig> {
        let d = train.images.dims();
        self.model.resolve(train.class_count, d.c, (d.h, d.w))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Architecture flags shared by the commands that build a model.
#[derive(Args, Clone, Debug, Default)]
pub struct ArchArgs {
    /// Filter count f; solved from --budget when omitted
    #[arg(long)]
    pub filters: Option<usize>,
    /// Parameter budget used to solve f
    #[arg(long)]
    pub budget: Option<u64>,
    /// Which count the budget constrains [default: full]
    #[arg(long)]
    pub convention: Option<BudgetConvention>,
    /// Iterations T
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Shortcut history h; 0 selects the plain recursion [default: 0]
    #[arg(long)]
    pub history: Option<usize>,
    /// Number of 2x2 max pools [default: 0]
    #[arg(long)]
    pub pools: Option<usize>,
    /// Pool placement: regular, front_loaded or a list like 2,5,8 [default: regular]
    #[arg(long)]
    pub schedule: Option<String>,
    /// Kernel size, e.g. 3x3 [default: 3x3]
    #[arg(long, value_parser = parse_hw)]
    pub kernel: Option<(usize, usize)>,
    /// Convolution parametrization [default: classical]
    #[arg(long)]
    pub conv_mode: Option<ConvMode>,
    /// Nonlinearity [default: relu]
    #[arg(long)]
    pub activation: Option<Activation>,
}

impl ArchArgs {
    pub fn apply(&self, m: &mut SweepEntry) {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {
                $(if let Some(v) = self.$f.clone() { m.$g = Some(v); })*
            };
        }
        set!(filters => filters, budget => budget, convention => convention,
             iterations => iterations, history => history, pools => pools,
             schedule => placement, kernel => kernel, conv_mode => conv_mode,
             activation => activation);
    }
}

/// Training flags.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    /// Epochs; rescales the default learning-rate drops [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate [default: 0.1]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs dividing the learning rate by 10; empty for none [default: 50,100,150]
    #[arg(long, value_parser = parse_list)]
    pub lr_drops: Option<EpochList>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay [default: 0]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed of initialization, shuffling and augmentation [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Enable the α double-well penalty with this initial weight
    #[arg(long)]
    pub alpha_reg: Option<f64>,
    /// Growth rate of the penalty weight per step [default: 1.5e-4]
    #[arg(long)]
    pub alpha_reg_eps: Option<f64>,
    /// Epochs with the penalty active [default: all]
    #[arg(long)]
    pub alpha_reg_epochs: Option<usize>,
}

impl TrainArgs {
    /// Without `--lr-drops`, an `--epochs` override moves the existing
    /// drops proportionally.
    pub fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            if self.lr_drops.is_none() {
                let mut drops: Vec<usize> = t.lr_drops.iter().map(|&d| d * v / t.epochs.max(1)).collect();
                drops.retain(|&d| d > 0 && d < v);
                drops.dedup();
                t.lr_drops = drops;
            }
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr0 = v;
        }
        if let Some(v) = &self.lr_drops {
            t.lr_drops = v.0.clone();
        }
        if let Some(v) = self.momentum {
            t.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(l) = self.alpha_reg {
            let r = t
                .alpha_reg
                .get_or_insert_with(|| AlphaRegConfig::with_defaults(t.epochs));
            r.lambda0 = l;
        }
        if let Some(r) = t.alpha_reg.as_mut() {
            if let Some(e) = self.alpha_reg_eps {
                r.eps = e;
            }
            r.epochs = self.alpha_reg_epochs.unwrap_or(r.epochs).min(t.epochs);
        }
    }
}

/// Dataset flags.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Dataset format
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the dataset files
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Class count (raw datasets only)
    #[arg(long)]
    pub classes: Option<usize>,
    /// Train on the first N training samples only
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Disable crop and flip augmentation
    #[arg(long)]
    pub no_augment: bool,
}

impl DataArgs {
    pub fn apply(&self, d: &mut DataSpec) {
        if let Some(v) = self.dataset {
            d.dataset = Some(v);
        }
        if let Some(v) = &self.data_dir {
            d.dir = Some(v.clone());
        }
        if let Some(v) = self.classes {
            d.classes = Some(v);
        }
        if let Some(v) = self.train_subset {
            d.train_subset = Some(v);
        }
        if self.no_augment {
            d.no_augment = Some(true);
        }
    }

    pub fn spec(&self) -> DataSpec {
        let mut d = DataSpec::default();
        self.apply(&mut d);
        d
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochList(pub Vec<usize>);

/// Parses a comma-separated list; the empty string is the empty list.
pub fn parse_list(s: &str) -> std::result::Result<EpochList, String> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| format!("bad epoch {v:?}")))
        .collect::<std::result::Result<_, _>>()
        .map(EpochList)
}

/// Parses `HxW` or a single `N` meaning `NxN`.
pub fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}
