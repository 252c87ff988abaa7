use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::distill::{ChimericOptions, DistillConfig, TrainingSchedule};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_REPLICATES, MIN_REPLICATES};
use crate::store::sha256_hex;
use crate::superfeatures::DEFAULT_FD_STEP;

/// Where the train and test sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A directory with `train-*` and `t10k-*` IDX files.
    Idx { dir: PathBuf },
    /// MNIST rows paired with Fashion-MNIST rows; 100 classes.
    Combined {
        mnist_dir: PathBuf,
        fashion_dir: PathBuf,
        /// Average-pool each 28x28 half to 14x14.
        #[serde(default)]
        downsample: bool,
    },
    /// CSV files with a header row. Features are standardized with the
    /// training statistics.
    Csv {
        train: PathBuf,
        test: PathBuf,
        label_column: String,
    },
    /// Gaussian classes with conditionally independent feature groups.
    Synthetic {
        group_sizes: Vec<usize>,
        num_classes: usize,
        train_samples: usize,
        test_samples: usize,
        #[serde(default = "one")]
        separation: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// How the superfeature partition is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SuperfeatureSource {
    /// Hessian dependency graph of the black-box teacher plus Louvain.
    Algorithm {
        #[serde(default = "default_hessian_samples")]
        hessian_samples: usize,
        #[serde(default = "default_fd_step")]
        fd_step: f64,
        #[serde(default = "default_resolution_step")]
        resolution_step: f64,
        #[serde(default = "default_max_resolution")]
        max_resolution: f64,
    },
    /// The partition known from how the data was built.
    Actual,
    /// Seeded random groups of near-equal size.
    Random { seed: u64 },
    /// A partition saved as JSON.
    File { path: PathBuf },
}

fn default_hessian_samples() -> usize {
    1000
}
fn default_fd_step() -> f64 {
    DEFAULT_FD_STEP
}
fn default_resolution_step() -> f64 {
    0.01
}
fn default_max_resolution() -> f64 {
    5.0
}

impl Default for SuperfeatureSource {
    fn default() -> Self {
        SuperfeatureSource::Algorithm {
            hessian_samples: default_hessian_samples(),
            fd_step: default_fd_step(),
            resolution_step: default_resolution_step(),
            max_resolution: default_max_resolution(),
        }
    }
}

/// Black-box widths and how the matching type-M widths are found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: Vec<usize>,
    /// Explicit type-M subnet widths.
    #[serde(default)]
    pub type_m_hidden: Option<Vec<usize>>,
    /// Parameter budget for the type-M model. Without either field the
    /// budget is the black box's own parameter count.
    #[serde(default)]
    pub type_m_budget: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_lr() -> f64 {
    0.001
}

impl StageSchedule {
    pub fn with_seed(&self, seed: u64) -> TrainingSchedule {
        TrainingSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: OptimizerKind::adam(),
            seed,
        }
    }
}

/// Student training variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Black-box student on hard labels.
    NoDistill,
    /// Black-box student from the black-box teacher.
    Kd,
    /// Type-M student from the type-M teacher.
    Ked,
    /// As `Ked`, also matching adapted hidden taps.
    KedHidden,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::NoDistill => "no-distill",
            Variant::Kd => "kd",
            Variant::Ked => "ked",
            Variant::KedHidden => "ked-hidden",
        }
    }

    pub fn is_type_m(self) -> bool {
        matches!(self, Variant::Ked | Variant::KedHidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChimericConfig {
    #[serde(default = "default_chimeric_samples")]
    pub samples_per_epoch: usize,
    #[serde(default = "default_chimeric_epochs")]
    pub epochs: usize,
    #[serde(default = "default_chimeric_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_chimeric_samples() -> usize {
    1_000_000
}
fn default_chimeric_epochs() -> usize {
    5
}
fn default_chimeric_batch() -> usize {
    100
}

impl ChimericConfig {
    pub fn options(&self, seed: u64) -> ChimericOptions {
        ChimericOptions {
            samples_per_epoch: self.samples_per_epoch,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

/// One experiment, read from a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Mixed into the seeds of the student stages only, so repeated student
    /// runs can share the teachers.
    #[serde(default)]
    pub replicate: u64,
    /// Number of superfeatures `M`.
    #[serde(default = "default_m")]
    pub superfeatures: usize,
    pub dataset: DatasetSource,
    /// Rows of the training set the teachers see; all when unset.
    #[serde(default)]
    pub teacher_samples: Option<usize>,
    /// Rows the students see; all of the teacher set when unset.
    #[serde(default)]
    pub student_samples: Option<usize>,
    /// Share of each stage's rows held out for per-epoch validation.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    pub teacher: ModelShape,
    pub student: ModelShape,
    pub teacher_schedule: StageSchedule,
    pub student_schedule: StageSchedule,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub superfeature_source: SuperfeatureSource,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub chimeric: Option<ChimericConfig>,
    #[serde(default = "default_replicates")]
    pub bootstrap_replicates: usize,
}

fn default_m() -> usize {
    4
}
fn default_validation() -> f64 {
    0.1
}
fn default_variants() -> Vec<Variant> {
    vec![Variant::NoDistill, Variant::Kd, Variant::Ked]
}
fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}

/// Seed for one stage: the first eight bytes of
/// `sha256(le_bytes(global) || stage)`.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let mut bytes = global.to_le_bytes().to_vec();
    bytes.extend_from_slice(stage.as_bytes());
    let hex = sha256_hex(&bytes);
    u64::from_str_radix(&hex[..16], 16).expect("hex digest")
}

fn config_error(detail: impl Into<String>) -> Error {
    Error::Config(detail.into())
}

/// Parse `key=value` where the value is TOML (`[20, 20]`, `0.5`, `true`) or,
/// failing that, a bare string.
fn parse_override(item: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| config_error(format!("override {item:?} is not key=value")))?;
    let key: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if key.iter().any(String::is_empty) {
        return Err(config_error(format!("bad key in override {item:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

fn set_path(table: &mut toml::Table, key: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = key.split_last().expect("nonempty key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("{k} is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse a TOML document, apply `key=value` overrides (dotted keys) on
    /// top and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| config_error(e.message().to_string()))?;
        for item in overrides {
            let (key, value) = parse_override(item)?;
            set_path(&mut table, &key, value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text, overrides)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialized form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.superfeatures == 0 {
            return Err(config_error("superfeatures must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(config_error(format!(
                "validation_fraction {} outside [0, 0.5)",
                self.validation_fraction
            )));
        }
        for (name, shape) in [("teacher", &self.teacher), ("student", &self.student)] {
            if shape.hidden.is_empty() || shape.hidden.contains(&0) {
                return Err(config_error(format!(
                    "{name}.hidden must be nonempty and positive"
                )));
            }
            if shape.type_m_hidden.is_some() && shape.type_m_budget.is_some() {
                return Err(config_error(format!(
                    "{name}: type_m_hidden and type_m_budget are mutually exclusive"
                )));
            }
            if let Some(h) = &shape.type_m_hidden {
                if h.is_empty() || h.contains(&0) {
                    return Err(config_error(format!(
                        "{name}.type_m_hidden must be positive"
                    )));
                }
            }
        }
        for (name, s) in [
            ("teacher_schedule", &self.teacher_schedule),
            ("student_schedule", &self.student_schedule),
        ] {
            if s.epochs == 0 || s.batch_size == 0 || !(s.learning_rate > 0.0) {
                return Err(config_error(format!(
                    "{name} needs positive epochs, batch and rate"
                )));
            }
        }
        self.distill
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        if self.variants.is_empty() {
            return Err(config_error("no student variants selected"));
        }
        if self.bootstrap_replicates < MIN_REPLICATES {
            return Err(config_error(format!(
                "bootstrap_replicates must be at least {MIN_REPLICATES}"
            )));
        }
        if let Some(c) = &self.chimeric {
            if c.samples_per_epoch == 0 || c.epochs == 0 || c.batch_size == 0 {
                return Err(config_error("chimeric settings must be positive"));
            }
            if !self.variants.contains(&Variant::Ked) {
                return Err(config_error(
                    "chimeric fine-tuning starts from the ked student",
                ));
            }
        }
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(config_error(format!(
                    "{what} {} does not exist",
                    p.display()
                )))
            }
        };
        match &self.dataset {
            DatasetSource::Idx { dir } => must_exist(dir, "dataset directory")?,
            DatasetSource::Combined {
                mnist_dir,
                fashion_dir,
                ..
            } => {
                must_exist(mnist_dir, "MNIST directory")?;
                must_exist(fashion_dir, "Fashion-MNIST directory")?;
            }
            DatasetSource::Csv { train, test, .. } => {
                must_exist(train, "training CSV")?;
                must_exist(test, "test CSV")?;
            }
            DatasetSource::Synthetic {
                group_sizes,
                num_classes,
                train_samples,
                test_samples,
                ..
            } => {
                if group_sizes.is_empty()
                    || *num_classes < 2
                    || *train_samples == 0
                    || *test_samples == 0
                {
                    return Err(config_error(
                        "synthetic dataset needs groups, classes and samples",
                    ));
                }
            }
        }
        match &self.superfeature_source {
            SuperfeatureSource::File { path } => must_exist(path, "partition file")?,
            SuperfeatureSource::Actual => {
                if matches!(
                    self.dataset,
                    DatasetSource::Idx { .. } | DatasetSource::Csv { .. }
                ) {
                    return Err(config_error(
                        "superfeature source `actual` needs a combined or synthetic dataset",
                    ));
                }
            }
            SuperfeatureSource::Algorithm {
                hessian_samples,
                fd_step,
                resolution_step,
                max_resolution,
            } => {
                if *hessian_samples == 0
                    || !(*fd_step > 0.0)
                    || !(*resolution_step > 0.0)
                    || max_resolution < resolution_step
                {
                    return Err(config_error("invalid superfeature search settings"));
                }
            }
            SuperfeatureSource::Random { .. } => {}
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }

    /// Seed for a student-side stage, which also depends on `replicate`.
    pub fn student_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed ^ stage_seed(self.replicate, "replicate"), stage)
    }
}
