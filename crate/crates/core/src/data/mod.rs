//! Datasets, loaders, synthetic generators and the chimeric sampler.

mod chimeric;
mod combine;
mod idx;
mod synthetic;
mod tabular;

pub use chimeric::{chimeric_sample, ChimericBatch, ChimericSampler};
pub use combine::{combine_mnist_fashion, downsample_2x};
pub use idx::{load_idx, load_idx_split, write_idx};
pub use synthetic::{gen_synthetic_independent, GaussianOracle, SyntheticData, SyntheticSpec};
pub use tabular::{load_csv, load_csv_with};

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::store::{Container, StoreKind};

/// Per-feature affine map `x -> (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Column means and population standard deviations. A column with zero
    /// spread gets scale 1.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if !x.is_matrix() || x.rows() == 0 {
            return Err(Error::invalid("cannot fit a normalization to no rows"));
        }
        let (n, d) = (x.rows(), x.cols());
        let mut shift = vec![0.0; d];
        for i in 0..n {
            shift.iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        shift.iter_mut().for_each(|s| *s /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(x.row(i)).zip(&shift) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { shift, scale })
    }

    pub fn apply(&self, x: &mut Tensor) -> Result<()> {
        if x.cols() != self.shift.len() {
            return Err(Error::shape(
                "normalize",
                format!(
                    "{} columns for a {}-feature normalization",
                    x.cols(),
                    self.shift.len()
                ),
            ));
        }
        let d = self.shift.len();
        for row in x.data_mut().chunks_mut(d) {
            for ((v, s), c) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) / c;
            }
        }
        Ok(())
    }
}

/// Feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Option<Normalization>,
    label_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if !features.is_matrix() {
            return Err(Error::shape(
                "dataset",
                format!("features {:?}", features.shape()),
            ));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} rows but {} labels", features.rows(), labels.len()),
            ));
        }
        if num_classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::invalid("dataset features contain NaN or infinity"));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            normalization: None,
            label_names: None,
        })
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = Some(n);
        self
    }

    pub fn with_label_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} label names for {} classes",
                names.len(),
                self.num_classes
            )));
        }
        self.label_names = Some(names);
        Ok(self)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }

    /// Rows at `idx`, in that order. Metadata is carried over.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let features = self.features.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
            label_names: self.label_names.clone(),
        })
    }

    /// Seeded uniform subset of `n` rows without replacement, kept in
    /// source order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!(
                "cannot draw {n} rows from {} samples",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let out = self.select(&idx)?;
        log::info!(
            "subsample of {n} rows, label counts {:?}",
            out.label_counts()
        );
        Ok(out)
    }

    /// Seeded split into `(rest, held_out)` with `round(fraction * K)` rows
    /// held out. Both parts keep source order.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("split fraction {fraction}")));
        }
        let held = (fraction * self.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = vec![false; self.len()];
        for i in sample(&mut rng, self.len(), held) {
            mask[i] = true;
        }
        let (out, keep): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| mask[i]);
        Ok((self.select(&keep)?, self.select(&out)?))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let c = self.container();
        c.write(path)?;
        Ok(c.config_hash())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let c = Container::read(path)?;
        Dataset::from_container(c, path)
    }

    fn container(&self) -> Container {
        let header = DatasetHeader {
            format: FORMAT.to_string(),
            rows: self.len(),
            cols: self.input_dim(),
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
            label_names: self.label_names.clone(),
        };
        Container {
            kind: StoreKind::Dataset,
            header: serde_json::to_string(&header).expect("header serializes"),
            arrays: vec![
                self.features.data().to_vec(),
                self.labels.iter().map(|&y| y as f64).collect(),
            ],
        }
    }

    fn from_container(c: Container, path: &Path) -> Result<Dataset> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            offset: 24,
            detail,
        };
        if c.kind != StoreKind::Dataset {
            return Err(bad("file holds a model, not a dataset".into()));
        }
        let h: DatasetHeader =
            serde_json::from_str(&c.header).map_err(|e| bad(format!("dataset header: {e}")))?;
        if h.format != FORMAT || c.arrays.len() != 2 {
            return Err(bad("not a dataset payload".into()));
        }
        let mut arrays = c.arrays.into_iter();
        let features = Tensor::matrix(h.rows, h.cols, arrays.next().expect("two arrays"))?;
        let labels = arrays
            .next()
            .expect("two arrays")
            .into_iter()
            .map(|v| v as usize)
            .collect();
        let mut ds = Dataset::new(features, labels, h.num_classes)?;
        ds.normalization = h.normalization;
        if let Some(names) = h.label_names {
            ds = ds.with_label_names(names)?;
        }
        Ok(ds)
    }
}

const FORMAT: &str = "ked-dataset";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    rows: usize,
    cols: usize,
    num_classes: usize,
    normalization: Option<Normalization>,
    label_names: Option<Vec<String>>,
}

/// Free-function form of [`Dataset::subsample`].
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    dataset.subsample(n, seed)
}
