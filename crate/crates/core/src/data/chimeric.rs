use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_rows, Tensor};
use crate::error::{Error, Result};
use crate::models::{Model, SuperfeaturePartition, TypeMModel};

/// Composite samples drawn from the product of per-group row sets.
///
/// Group `m` of a composite is copied from an independently drawn base row.
/// A type-M teacher reads each group in isolation, so its explanation of a
/// composite is the cached explanation of the row the group came from, and
/// its prediction follows from the combination rule without another forward
/// pass.
#[derive(Debug, Clone)]
pub struct ChimericSampler {
    base: Tensor,
    partition: SuperfeaturePartition,
    log_explanations: Vec<Tensor>,
    explanations: Vec<Tensor>,
    prior_term: Vec<f64>,
    rng: ChaCha8Rng,
}

/// A batch of composites with the teacher's cached outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChimericBatch {
    pub features: Tensor,
    /// Argmax of the teacher prediction.
    pub labels: Vec<usize>,
    pub prediction: Tensor,
    pub explanations: Vec<Tensor>,
    /// Base row used for each group, `indices[i][m]`.
    pub indices: Vec<Vec<usize>>,
}

impl ChimericSampler {
    /// Caches `teacher`'s explanations on every row of `base`.
    pub fn new(base: &Tensor, teacher: &TypeMModel, seed: u64) -> Result<Self> {
        if !base.is_matrix() || base.rows() == 0 {
            return Err(Error::invalid("chimeric sampler needs a nonempty base set"));
        }
        let model = Model::TypeM(teacher.clone());
        let out = model.predict(base)?;
        Ok(ChimericSampler {
            base: base.clone(),
            partition: teacher.partition().clone(),
            log_explanations: out.log_explanations,
            explanations: out.explanations,
            prior_term: teacher.prior_term(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn partition(&self) -> &SuperfeaturePartition {
        &self.partition
    }

    pub fn base_len(&self) -> usize {
        self.base.rows()
    }

    /// Assemble the composite with the given base row per group.
    pub fn composite(&self, rows: &[usize]) -> Result<ChimericBatch> {
        self.assemble(vec![rows.to_vec()])
    }

    /// Draw `n` composites uniformly from the product set.
    pub fn sample(&mut self, n: usize) -> Result<ChimericBatch> {
        if n == 0 {
            return Err(Error::invalid("chimeric sample of size 0"));
        }
        let (k, m) = (self.base.rows(), self.partition.len());
        let indices = (0..n)
            .map(|_| (0..m).map(|_| self.rng.gen_range(0..k)).collect())
            .collect();
        self.assemble(indices)
    }

    fn assemble(&self, indices: Vec<Vec<usize>>) -> Result<ChimericBatch> {
        let n = indices.len();
        let (d, m) = (self.base.cols(), self.partition.len());
        let c = self.prior_term.len();
        let mut features = vec![0.0; n * d];
        let mut total = vec![0.0; n * c];
        let mut explanations = vec![Vec::with_capacity(n * c); m];
        for (i, rows) in indices.iter().enumerate() {
            if rows.len() != m || rows.iter().any(|&r| r >= self.base.rows()) {
                return Err(Error::invalid(format!("composite rows {rows:?}")));
            }
            let out = &mut features[i * d..(i + 1) * d];
            let z = &mut total[i * c..(i + 1) * c];
            for (g, (&r, group)) in rows.iter().zip(self.partition.groups()).enumerate() {
                let src = self.base.row(r);
                for &j in group {
                    out[j] = src[j];
                }
                explanations[g].extend_from_slice(self.explanations[g].row(r));
                if m > 1 {
                    z.iter_mut()
                        .zip(self.log_explanations[g].row(r))
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        let prediction = if m == 1 {
            Tensor::matrix(n, c, explanations[0].clone())?
        } else {
            for row in total.chunks_mut(c) {
                row.iter_mut()
                    .zip(&self.prior_term)
                    .for_each(|(a, b)| *a += b);
            }
            softmax_rows(&Tensor::matrix(n, c, total)?)
        };
        Ok(ChimericBatch {
            features: Tensor::matrix(n, d, features)?,
            labels: prediction.argmax_rows(),
            prediction,
            explanations: explanations
                .into_iter()
                .map(|e| Tensor::matrix(n, c, e))
                .collect::<Result<_>>()?,
            indices,
        })
    }
}

/// Draw `n` composites, checking that `teacher` splits features the same way
/// as the sampler.
pub fn chimeric_sample(
    sampler: &mut ChimericSampler,
    teacher: &TypeMModel,
    n: usize,
) -> Result<ChimericBatch> {
    if teacher.partition() != sampler.partition() {
        return Err(Error::invalid(
            "teacher partition differs from the sampler's partition",
        ));
    }
    sampler.sample(n)
}
