use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::SuperfeaturePartition;

/// Shape of a synthetic set with conditionally independent feature groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub group_sizes: Vec<usize>,
    pub num_classes: usize,
    pub samples: usize,
    /// Standard deviation of the class means around the origin, per feature.
    /// Noise around each mean has unit variance.
    pub separation: f64,
    pub seed: u64,
}

/// Exact posteriors of the generating model.
///
/// Given the class, the groups are independent isotropic Gaussians, so both
/// the per-group and the joint posteriors have closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    partition: SuperfeaturePartition,
    prior: Vec<f64>,
    /// `means[m][y]` is the mean of group `m` under class `y`.
    means: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub partition: SuperfeaturePartition,
    pub oracle: GaussianOracle,
}

impl GaussianOracle {
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn partition(&self) -> &SuperfeaturePartition {
        &self.partition
    }

    /// Log-likelihood of group `m` under every class, up to a shared constant.
    fn group_log_likelihood(&self, x: &[f64], m: usize) -> Vec<f64> {
        let group = &self.partition.groups()[m];
        self.means[m]
            .iter()
            .map(|mu| {
                -0.5 * group
                    .iter()
                    .zip(mu)
                    .map(|(&i, u)| (x[i] - u) * (x[i] - u))
                    .sum::<f64>()
            })
            .collect()
    }

    fn normalize(mut logits: Vec<f64>) -> Vec<f64> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logits.iter_mut().for_each(|l| *l = (*l - max).exp());
        let total: f64 = logits.iter().sum();
        logits.iter_mut().for_each(|p| *p /= total);
        logits
    }

    /// `p(y | x_m)` for one full-width sample row.
    pub fn group_posterior(&self, x: &[f64], m: usize) -> Vec<f64> {
        let ll = self.group_log_likelihood(x, m);
        GaussianOracle::normalize(
            ll.iter()
                .zip(&self.prior)
                .map(|(l, p)| l + p.ln())
                .collect(),
        )
    }

    /// `p(y | x)` for one sample row.
    pub fn joint_posterior(&self, x: &[f64]) -> Vec<f64> {
        let mut logits: Vec<f64> = self.prior.iter().map(|p| p.ln()).collect();
        for m in 0..self.partition.len() {
            for (z, l) in logits.iter_mut().zip(self.group_log_likelihood(x, m)) {
                *z += l;
            }
        }
        GaussianOracle::normalize(logits)
    }

    /// Accuracy of the Bayes classifier on `dataset`.
    pub fn bayes_accuracy(&self, dataset: &Dataset) -> f64 {
        let hits = (0..dataset.len())
            .filter(|&i| {
                let p = self.joint_posterior(dataset.features().row(i));
                argmax(&p) == dataset.labels()[i]
            })
            .count();
        hits as f64 / dataset.len() as f64
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Draw labels from a seeded non-uniform prior, then each group from a
/// class-conditional Gaussian independently of the other groups.
pub fn gen_synthetic_independent(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.num_classes < 2 || spec.samples == 0 || !(spec.separation > 0.0) {
        return Err(Error::invalid(format!("synthetic spec {spec:?}")));
    }
    let partition = SuperfeaturePartition::contiguous(&spec.group_sizes)?;
    let d = partition.input_dim();
    let c = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut prior: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= total);

    let mut normal = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    };
    let means: Vec<Vec<Vec<f64>>> = partition
        .groups()
        .iter()
        .map(|g| {
            (0..c)
                .map(|_| g.iter().map(|_| normal(spec.separation)).collect())
                .collect()
        })
        .collect();

    let cumulative: Vec<f64> = prior
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let mut x = vec![0.0; spec.samples * d];
    let mut y = Vec::with_capacity(spec.samples);
    for row in x.chunks_mut(d) {
        let u: f64 = rng.gen();
        let label = cumulative.iter().position(|&c| u < c).unwrap_or(c - 1);
        y.push(label);
        for (m, group) in partition.groups().iter().enumerate() {
            for (&i, mu) in group.iter().zip(&means[m][label]) {
                let z: f64 = StandardNormal.sample(&mut rng);
                row[i] = mu + z;
            }
        }
    }
    let dataset = Dataset::new(Tensor::matrix(spec.samples, d, x)?, y, c)?;
    let oracle = GaussianOracle {
        partition: partition.clone(),
        prior,
        means,
    };
    Ok(SyntheticData {
        dataset,
        partition,
        oracle,
    })
}
