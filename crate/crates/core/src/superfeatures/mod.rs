//! Superfeatures from feature dependencies.
//!
//! A model whose log-posterior is a sum of per-group terms has zero
//! cross-partials between features of different groups. Running this in
//! reverse, the averaged input Hessian of a trained black box tells which
//! features interact; features that interact strongly are grouped by
//! community detection on the graph of absolute Hessian entries.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{input_gradients, OutputSelection, Tape, Tensor, Var};
use crate::community::{louvain, WeightedGraph};
use crate::error::{Error, Result};
use crate::models::{Model, SuperfeaturePartition};

/// Default finite-difference step on standardized inputs.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Rows per gradient batch during Hessian estimation.
const HESSIAN_BATCH_ROWS: usize = 2048;

/// Class-summed input Hessian of `log p(y | x)` averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    matrix: Tensor,
    sample_count: usize,
    class_summed: bool,
}

impl HessianEstimate {
    pub fn new(matrix: Tensor, sample_count: usize, class_summed: bool) -> Result<Self> {
        if !matrix.is_matrix() || matrix.rows() != matrix.cols() {
            return Err(Error::shape(
                "hessian",
                format!("{:?} is not square", matrix.shape()),
            ));
        }
        if sample_count == 0 || !matrix.is_finite() {
            return Err(Error::invalid(
                "hessian needs at least one sample and finite entries",
            ));
        }
        Ok(HessianEstimate {
            matrix,
            sample_count,
            class_summed,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// Samples that contributed; non-finite ones are left out.
    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn class_summed(&self) -> bool {
        self.class_summed
    }
}

/// Average over the rows of `x` of the Hessian of the class-summed output
/// of `log_output`, by central differences of analytic input gradients.
///
/// Summing over classes first is exact here: the Hessian is linear, so the
/// class sum can be taken on the scalar whose gradient is differenced.
/// Samples are processed in fixed-size chunks spread over worker threads and
/// merged in chunk order, so the result does not depend on the thread count.
pub fn estimate_hessian_with<F>(log_output: F, x: &Tensor, fd_step: f64) -> Result<HessianEstimate>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {fd_step}"
        )));
    }
    if !x.is_matrix() || x.rows() == 0 {
        return Err(Error::invalid(
            "hessian estimate needs a nonempty sample matrix",
        ));
    }
    let d = x.cols();
    let per_chunk = (HESSIAN_BATCH_ROWS / (2 * d)).max(1);
    let chunks: Vec<Vec<usize>> = (0..x.rows())
        .collect::<Vec<_>>()
        .chunks(per_chunk)
        .map(<[usize]>::to_vec)
        .collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(chunks.len());

    let run = |chunk: &[usize]| hessian_chunk(&log_output, x, chunk, fd_step);
    let partials: Vec<Result<(Vec<f64>, usize)>> = if workers <= 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<(Vec<f64>, usize)>>> =
            (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (chunks, run) = (&chunks, &run);
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|i| (i, run(&chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("hessian worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every chunk ran"))
            .collect()
    };

    let mut total = vec![0.0; d * d];
    let mut count = 0;
    for p in partials {
        let (sum, n) = p?;
        total.iter_mut().zip(&sum).for_each(|(a, b)| *a += b);
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid(
            "every sample produced a non-finite gradient",
        ));
    }
    total.iter_mut().for_each(|v| *v /= count as f64);
    HessianEstimate::new(Tensor::matrix(d, d, total)?, count, true)
}

/// Summed Hessians of the samples in `chunk` and how many were finite.
fn hessian_chunk<F>(
    log_output: &F,
    x: &Tensor,
    chunk: &[usize],
    h: f64,
) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let d = x.cols();
    // Rows 2i and 2i+1 of each sample block are x + h e_i and x - h e_i.
    let mut probe = Vec::with_capacity(chunk.len() * 2 * d * d);
    for &r in chunk {
        let row = x.row(r);
        for i in 0..d {
            for sign in [1.0, -1.0] {
                let start = probe.len();
                probe.extend_from_slice(row);
                probe[start + i] += sign * h;
            }
        }
    }
    let probe = Tensor::matrix(chunk.len() * 2 * d, d, probe)?;
    let grads = input_gradients(log_output, &probe, OutputSelection::AllClasses)?;

    let mut sum = vec![0.0; d * d];
    let mut used = 0;
    let mut hess = vec![0.0; d * d];
    for (k, &r) in chunk.iter().enumerate() {
        for i in 0..d {
            let plus = grads.row(k * 2 * d + 2 * i);
            let minus = grads.row(k * 2 * d + 2 * i + 1);
            for j in 0..d {
                hess[i * d + j] = (plus[j] - minus[j]) / (2.0 * h);
            }
        }
        if hess.iter().all(|v| v.is_finite()) {
            sum.iter_mut().zip(&hess).for_each(|(a, b)| *a += b);
            used += 1;
        } else {
            log::warn!("skipping sample {r}: non-finite input gradient");
        }
    }
    Ok((sum, used))
}

/// [`estimate_hessian_with`] on a frozen model's log-prediction.
pub fn estimate_hessian(teacher: &Model, x: &Tensor, fd_step: f64) -> Result<HessianEstimate> {
    estimate_hessian_with(
        |tape, input| {
            let p = teacher.bind(tape, false);
            teacher.log_prediction(tape, &p, input)
        },
        x,
        fd_step,
    )
}

/// Symmetric nonnegative feature-dependency weights with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMatrix {
    w: Tensor,
}

impl DependencyMatrix {
    /// Validates symmetry (exact), nonnegativity, finiteness and the diagonal.
    pub fn new(w: Tensor) -> Result<Self> {
        if !w.is_matrix() || w.rows() != w.cols() || w.rows() == 0 {
            return Err(Error::shape(
                "dependency_matrix",
                format!("{:?}", w.shape()),
            ));
        }
        let d = w.rows();
        for i in 0..d {
            if w.get(i, i) != 0.0 {
                return Err(Error::invalid(format!(
                    "diagonal entry {i} is {}",
                    w.get(i, i)
                )));
            }
            for j in 0..d {
                let v = w.get(i, j);
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("entry ({i}, {j}) is {v}")));
                }
                if v != w.get(j, i) {
                    return Err(Error::invalid(format!(
                        "entries ({i}, {j}) and ({j}, {i}) differ"
                    )));
                }
            }
        }
        Ok(DependencyMatrix { w })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn graph(&self) -> WeightedGraph {
        WeightedGraph::from_dense(self.dim(), self.w.data()).expect("validated dependency matrix")
    }

    /// Plain-text form: `d` on the first line, then `d` rows of `d` values.
    pub fn to_text(&self) -> String {
        let d = self.dim();
        let mut out = format!("{d}\n");
        for i in 0..d {
            let row: Vec<String> = self.w.row(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let fail = |line: usize, detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            column: 1,
            detail,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines
            .next()
            .ok_or_else(|| fail(1, "empty matrix file".into()))?;
        let d: usize = head
            .trim()
            .parse()
            .map_err(|e| fail(1, format!("bad dimension {head:?}: {e}")))?;
        let mut values = Vec::with_capacity(d * d);
        let mut rows = 0;
        for (n, line) in lines {
            rows += 1;
            if rows > d {
                return Err(fail(n + 1, format!("more than {d} rows")));
            }
            let before = values.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| fail(n + 1, format!("bad value {tok:?}: {e}")))?;
                values.push(v);
            }
            if values.len() - before != d {
                return Err(fail(
                    n + 1,
                    format!("expected {d} values, found {}", values.len() - before),
                ));
            }
        }
        if rows != d {
            return Err(fail(rows + 1, format!("expected {d} rows, found {rows}")));
        }
        DependencyMatrix::new(Tensor::matrix(d, d, values)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DependencyMatrix::from_text(&text, path)
    }
}

/// `W = |H| + |H|ᵀ` with the diagonal set to zero.
pub fn build_dependency_matrix(h: &HessianEstimate) -> DependencyMatrix {
    let d = h.dim();
    let m = h.matrix();
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        for j in i + 1..d {
            let v = m.get(i, j).abs() + m.get(j, i).abs();
            w[i * d + j] = v;
            w[j * d + i] = v;
        }
    }
    DependencyMatrix::new(Tensor::matrix(d, d, w).expect("square")).expect("constructed valid")
}

/// Louvain communities of `W` at one resolution, as a partition of features.
/// Features without any dependency end up as singletons.
pub fn construct_superfeatures(
    w: &DependencyMatrix,
    resolution: f64,
    seed: u64,
) -> Result<SuperfeaturePartition> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::invalid(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    let communities = louvain(&w.graph(), resolution, seed);
    let partition = SuperfeaturePartition::from_assignment(communities.assignment())?;
    if w.matrix().data().iter().all(|&v| v == 0.0) {
        log::warn!("dependency matrix is all zero; every feature is its own superfeature");
    }
    Ok(partition)
}

/// Outcome of a resolution scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionChoice {
    pub resolution: f64,
    pub partition: SuperfeaturePartition,
    /// Community count Louvain produced at `resolution`, before any repair.
    pub communities_found: usize,
    pub repaired: bool,
}

/// Scan resolutions `step, 2·step, ...` up to `max_resolution` for the first
/// one at which Louvain finds exactly `target` communities.
///
/// Without an exact hit the resolution with the closest count wins (the
/// smaller one on ties) and its partition is repaired: the pair of groups
/// with the largest total weight between them is merged while there are too
/// many, and the largest group is split while there are too few.
pub fn tune_resolution(
    w: &DependencyMatrix,
    target: usize,
    step: f64,
    max_resolution: f64,
    seed: u64,
) -> Result<ResolutionChoice> {
    let d = w.dim();
    if target == 0 || target > d {
        return Err(Error::invalid(format!(
            "target of {target} superfeatures for {d} features"
        )));
    }
    if !(step > 0.0 && step.is_finite() && max_resolution >= step) {
        return Err(Error::invalid(format!(
            "resolution scan with step {step} up to {max_resolution}"
        )));
    }
    let graph = w.graph();
    let steps = (max_resolution / step + 1e-9).floor() as usize;
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for k in 1..=steps {
        let gamma = step * k as f64;
        let found = louvain(&graph, gamma, seed);
        let count = found.community_count();
        log::debug!("resolution {gamma:.4}: {count} communities");
        if count == target {
            return Ok(ResolutionChoice {
                resolution: gamma,
                partition: SuperfeaturePartition::from_assignment(found.assignment())?,
                communities_found: count,
                repaired: false,
            });
        }
        let better = best
            .as_ref()
            .is_none_or(|(c, _, _)| count.abs_diff(target) < c.abs_diff(target));
        if better {
            best = Some((count, gamma, found.assignment().to_vec()));
        }
    }
    let (count, gamma, labels) = best.expect("at least one resolution scanned");
    log::warn!(
        "no resolution up to {max_resolution} gives {target} communities; repairing {count} found at {gamma}"
    );
    let groups = repair(w, group_lists(&labels), target, seed)?;
    Ok(ResolutionChoice {
        resolution: gamma,
        partition: SuperfeaturePartition::new(d, groups)?,
        communities_found: count,
        repaired: true,
    })
}

fn group_lists(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn between(w: &DependencyMatrix, a: &[usize], b: &[usize]) -> f64 {
    a.iter()
        .map(|&i| b.iter().map(|&j| w.matrix().get(i, j)).sum::<f64>())
        .sum()
}

fn repair(
    w: &DependencyMatrix,
    mut groups: Vec<Vec<usize>>,
    target: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    while groups.len() > target {
        let mut pick = (0, 1, f64::NEG_INFINITY);
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let v = between(w, &groups[a], &groups[b]);
                if v > pick.2 {
                    pick = (a, b, v);
                }
            }
        }
        let merged = groups.remove(pick.1);
        groups[pick.0].extend(merged);
    }
    while groups.len() < target {
        let (largest, _) =
            groups.iter().enumerate().fold(
                (0, 0),
                |b, (i, g)| if g.len() > b.1 { (i, g.len()) } else { b },
            );
        let members = groups.remove(largest);
        let (left, right) = split_group(w, &members, seed)?;
        groups.push(left);
        groups.push(right);
    }
    Ok(groups)
}

/// Split one group in two with Louvain on its induced subgraph, raising the
/// resolution until it breaks apart and merging surplus parts back by
/// weight. A group Louvain will not split is cut into index halves.
fn split_group(
    w: &DependencyMatrix,
    members: &[usize],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = members.len();
    debug_assert!(n >= 2, "a group below target size always exists");
    let sub: Vec<f64> = members
        .iter()
        .flat_map(|&i| members.iter().map(move |&j| (i, j)))
        .map(|(i, j)| w.matrix().get(i, j))
        .collect();
    let sub = DependencyMatrix::new(Tensor::matrix(n, n, sub)?)?;
    let graph = sub.graph();
    let mut gamma = 1.0;
    while gamma <= 1024.0 {
        let parts = louvain(&graph, gamma, seed);
        if parts.community_count() >= 2 {
            let local = repair(&sub, group_lists(parts.assignment()), 2, seed)?;
            let lift = |g: &Vec<usize>| g.iter().map(|&i| members[i]).collect::<Vec<_>>();
            return Ok((lift(&local[0]), lift(&local[1])));
        }
        gamma *= 2.0;
    }
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let right = sorted.split_off(n / 2);
    Ok((sorted, right))
}

/// Share of total weight on pairs that straddle two groups; 0 for an all-zero
/// matrix.
pub fn cross_block_mass(w: &DependencyMatrix, partition: &SuperfeaturePartition) -> Result<f64> {
    if partition.input_dim() != w.dim() {
        return Err(Error::shape(
            "cross_block_mass",
            format!(
                "{} features in W, {} in the partition",
                w.dim(),
                partition.input_dim()
            ),
        ));
    }
    let label = partition.assignment();
    let d = w.dim();
    let (mut cross, mut total) = (0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            let v = w.matrix().get(i, j);
            total += v;
            if label[i] != label[j] {
                cross += v;
            }
        }
    }
    Ok(if total == 0.0 { 0.0 } else { cross / total })
}

/// Largest fraction of features two partitions agree on after matching their
/// groups one to one. Both must cover the same features with the same number
/// of groups (at most 8, matched exhaustively).
pub fn partition_agreement(a: &SuperfeaturePartition, b: &SuperfeaturePartition) -> Result<f64> {
    if a.input_dim() != b.input_dim() || a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cannot match {} groups over {} features with {} over {}",
            a.len(),
            a.input_dim(),
            b.len(),
            b.input_dim()
        )));
    }
    let m = a.len();
    if m > 8 {
        return Err(Error::invalid(format!(
            "{m} groups is too many to match exhaustively"
        )));
    }
    let mut overlap = vec![vec![0usize; m]; m];
    for (&i, &j) in a.assignment().iter().zip(&b.assignment()) {
        overlap[i][j] += 1;
    }
    fn best(row: usize, used: &mut [bool], overlap: &[Vec<usize>]) -> usize {
        if row == overlap.len() {
            return 0;
        }
        let mut top = 0;
        for j in 0..overlap.len() {
            if !used[j] {
                used[j] = true;
                top = top.max(overlap[row][j] + best(row + 1, used, overlap));
                used[j] = false;
            }
        }
        top
    }
    Ok(best(0, &mut vec![false; m], &overlap) as f64 / a.input_dim() as f64)
}

/// Settings for the full superfeature search.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperfeatureSearch {
    pub target: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_resolution_step")]
    pub resolution_step: f64,
    #[serde(default = "default_max_resolution")]
    pub max_resolution: f64,
    #[serde(default)]
    pub seed: u64,
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

impl SuperfeatureSearch {
    pub fn new(target: usize, seed: u64) -> Self {
        SuperfeatureSearch {
            target,
            fd_step: DEFAULT_FD_STEP,
            resolution_step: default_resolution_step(),
            max_resolution: default_max_resolution(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuperfeatureResult {
    pub hessian: HessianEstimate,
    pub dependency: DependencyMatrix,
    pub choice: ResolutionChoice,
}

/// Hessian, dependency matrix and tuned communities in one call.
pub fn find_superfeatures(
    teacher: &Model,
    x: &Tensor,
    search: &SuperfeatureSearch,
) -> Result<SuperfeatureResult> {
    let hessian = estimate_hessian(teacher, x, search.fd_step)?;
    let dependency = build_dependency_matrix(&hessian);
    let choice = tune_resolution(
        &dependency,
        search.target,
        search.resolution_step,
        search.max_resolution,
        search.seed,
    )?;
    log::info!(
        "superfeatures: {} groups of sizes {:?} at resolution {:.2}",
        choice.partition.len(),
        choice.partition.group_sizes(),
        choice.resolution
    );
    Ok(SuperfeatureResult {
        hessian,
        dependency,
        choice,
    })
}
