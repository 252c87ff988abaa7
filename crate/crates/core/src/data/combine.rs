use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::SuperfeaturePartition;

/// Pair each MNIST row with a Fashion row and concatenate them.
///
/// Fashion rows are matched to MNIST rows through a seeded permutation; when
/// the sets differ in size the larger is truncated. The label of a pair is
/// `10 * digit + garment`. The returned partition is the true split: the
/// first half of the columns come from MNIST, the second half from Fashion.
pub fn combine_mnist_fashion(
    mnist: &Dataset,
    fashion: &Dataset,
    seed: u64,
) -> Result<(Dataset, SuperfeaturePartition)> {
    if mnist.input_dim() != fashion.input_dim() {
        return Err(Error::shape(
            "combine_mnist_fashion",
            format!("{} vs {} features", mnist.input_dim(), fashion.input_dim()),
        ));
    }
    if mnist.num_classes() != 10 || fashion.num_classes() != 10 {
        return Err(Error::invalid("both sources must have 10 classes"));
    }
    let d = mnist.input_dim();
    let k = mnist.len().min(fashion.len());
    let mut pair: Vec<usize> = (0..fashion.len()).collect();
    pair.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut x = Vec::with_capacity(k * 2 * d);
    let mut y = Vec::with_capacity(k);
    for (i, &j) in pair.iter().take(k).enumerate() {
        x.extend_from_slice(mnist.features().row(i));
        x.extend_from_slice(fashion.features().row(j));
        y.push(10 * mnist.labels()[i] + fashion.labels()[j]);
    }
    let ds = Dataset::new(Tensor::matrix(k, 2 * d, x)?, y, 100)?;
    let partition = SuperfeaturePartition::contiguous(&[d, d])?;
    Ok((ds, partition))
}

/// Average-pool square `side x side` images by 2 in each direction.
pub fn downsample_2x(dataset: &Dataset, side: usize) -> Result<Dataset> {
    if side * side != dataset.input_dim() || !side.is_multiple_of(2) {
        return Err(Error::shape(
            "downsample_2x",
            format!(
                "{} features are not an even square of side {side}",
                dataset.input_dim()
            ),
        ));
    }
    let half = side / 2;
    let n = dataset.len();
    let mut out = Vec::with_capacity(n * half * half);
    for i in 0..n {
        let img = dataset.features().row(i);
        for r in 0..half {
            for c in 0..half {
                let at = |dr: usize, dc: usize| img[(2 * r + dr) * side + 2 * c + dc];
                out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
    }
    Dataset::new(
        Tensor::matrix(n, half * half, out)?,
        dataset.labels().to_vec(),
        dataset.num_classes(),
    )
}
