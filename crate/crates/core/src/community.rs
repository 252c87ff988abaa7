//! Weighted-graph community detection with the Louvain method.
//!
//! Modularity with resolution `γ` is
//! `Q = Σ_c [ Σ_in(c) / 2m − γ (Σ_tot(c) / 2m)² ]`, where `Σ_in(c)` counts
//! each intra-community edge weight twice and `Σ_tot(c)` is the community's
//! total weighted degree. Larger `γ` favours smaller communities.
//!
//! The implementation is fully deterministic for a given seed: node visiting
//! order is a seeded shuffle, moves need a modularity gain above
//! [`GAIN_THRESHOLD`], and ties between equally good target communities go to
//! the lowest community id.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum modularity improvement for a node move.
pub const GAIN_THRESHOLD: f64 = 1e-12;

/// Undirected graph with positive edge weights, no self-loops and no
/// parallel edges. Edges are stored with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    node_count: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl WeightedGraph {
    /// Validate and normalise an edge list. Each edge may be given in either
    /// orientation.
    pub fn new(node_count: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::invalid("graph needs at least one node"));
        }
        let mut norm = Vec::with_capacity(edges.len());
        for (i, j, w) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::invalid(format!(
                    "edge ({i}, {j}) outside {node_count} nodes"
                )));
            }
            if i == j {
                return Err(Error::invalid(format!("self-loop on node {i}")));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::invalid(format!("edge ({i}, {j}) has weight {w}")));
            }
            norm.push((i.min(j), i.max(j), w));
        }
        norm.sort_by_key(|a| (a.0, a.1));
        if let Some(w) = norm
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::invalid(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(WeightedGraph {
            node_count,
            edges: norm,
        })
    }

    /// Graph from a dense row-major `n x n` weight matrix, reading the upper
    /// triangle. Entries that are exactly zero produce no edge.
    pub fn from_dense(n: usize, weights: &[f64]) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::shape(
                "from_dense",
                format!("{} values for a {n}x{n} matrix", weights.len()),
            ));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = weights[i * n + j];
                if w < 0.0 || !w.is_finite() {
                    return Err(Error::invalid(format!("weight {w} at ({i}, {j})")));
                }
                if w > 0.0 {
                    edges.push((i, j, w));
                }
            }
        }
        WeightedGraph::new(n, edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }

    /// Weighted degree of every node.
    pub fn degrees(&self) -> Vec<f64> {
        let mut k = vec![0.0; self.node_count];
        for &(i, j, w) in &self.edges {
            k[i] += w;
            k[j] += w;
        }
        k
    }
}

/// Community label per node, numbered contiguously from zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
}

impl Partition {
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::invalid("partition of zero nodes"));
        }
        let count = assignment.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; count];
        for &c in &assignment {
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("community ids are not contiguous"));
        }
        Ok(Partition { assignment })
    }

    /// Relabel arbitrary labels to `0..k` in order of first appearance.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let assignment = labels
            .iter()
            .map(|&l| {
                let next = map.len();
                *map.entry(l).or_insert(next)
            })
            .collect();
        Partition { assignment }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn node_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn community_count(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    /// Member nodes of each community, in ascending order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.community_count()];
        for (node, &c) in self.assignment.iter().enumerate() {
            groups[c].push(node);
        }
        groups
    }
}

/// Every node in its own community.
pub fn singleton_partition(graph: &WeightedGraph) -> Partition {
    Partition {
        assignment: (0..graph.node_count()).collect(),
    }
}

/// Resolution-scaled modularity. A graph without edges has modularity 0.
pub fn modularity(graph: &WeightedGraph, partition: &Partition, resolution: f64) -> Result<f64> {
    if partition.node_count() != graph.node_count() {
        return Err(Error::invalid(format!(
            "partition covers {} nodes, graph has {}",
            partition.node_count(),
            graph.node_count()
        )));
    }
    let m2 = 2.0 * graph.total_weight();
    if m2 == 0.0 {
        return Ok(0.0);
    }
    let k = partition.community_count();
    let mut inner = vec![0.0; k];
    let mut total = vec![0.0; k];
    let comm = partition.assignment();
    for &(i, j, w) in graph.edges() {
        if comm[i] == comm[j] {
            inner[comm[i]] += 2.0 * w;
        }
        total[comm[i]] += w;
        total[comm[j]] += w;
    }
    Ok(inner
        .iter()
        .zip(&total)
        .map(|(sin, stot)| sin / m2 - resolution * (stot / m2).powi(2))
        .sum())
}

/// One aggregation level of a Louvain run.
#[derive(Debug, Clone)]
pub struct LouvainLevel {
    /// Partition of the original nodes after this level.
    pub partition: Partition,
    /// Its modularity on the original graph.
    pub modularity: f64,
}

/// Louvain community detection.
pub fn louvain(graph: &WeightedGraph, resolution: f64, seed: u64) -> Partition {
    louvain_levels(graph, resolution, seed)
        .pop()
        .map(|l| l.partition)
        .unwrap_or_else(|| singleton_partition(graph))
}

/// Louvain run returning the partition reached after each aggregation level.
///
/// An empty result means no node ever moved: the singleton partition is
/// already a local optimum.
pub fn louvain_levels(graph: &WeightedGraph, resolution: f64, seed: u64) -> Vec<LouvainLevel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = LevelGraph::from_graph(graph);
    if level.m2 == 0.0 {
        return Vec::new();
    }
    let mut membership: Vec<usize> = (0..graph.node_count()).collect();
    let mut levels = Vec::new();
    loop {
        let (moved, comm) = level.local_moves(resolution, &mut rng);
        if !moved {
            break;
        }
        let relabelled = Partition::from_labels(&comm);
        for m in membership.iter_mut() {
            *m = relabelled.assignment[*m];
        }
        let partition = Partition {
            assignment: membership.clone(),
        };
        let q = modularity(graph, &partition, resolution).expect("sizes agree");
        levels.push(LouvainLevel {
            partition,
            modularity: q,
        });
        if relabelled.community_count() == level.node_count() {
            break;
        }
        level = level.aggregate(&relabelled);
    }
    levels
}

/// Graph at one Louvain level, possibly carrying self-loops from aggregation.
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_weight: Vec<f64>,
    degree: Vec<f64>,
    m2: f64,
}

impl LevelGraph {
    fn from_graph(g: &WeightedGraph) -> Self {
        let n = g.node_count();
        let mut adj = vec![Vec::new(); n];
        for &(i, j, w) in g.edges() {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        Self::finish(adj, vec![0.0; n])
    }

    fn finish(adj: Vec<Vec<(usize, f64)>>, self_weight: Vec<f64>) -> Self {
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_weight)
            .map(|(a, s)| a.iter().map(|e| e.1).sum::<f64>() + 2.0 * s)
            .collect();
        let m2 = degree.iter().sum();
        LevelGraph {
            adj,
            self_weight,
            degree,
            m2,
        }
    }

    fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Repeated passes of greedy node moves until a full pass moves nothing.
    fn local_moves(&self, resolution: f64, rng: &mut ChaCha8Rng) -> (bool, Vec<usize>) {
        let n = self.node_count();
        let mut comm: Vec<usize> = (0..n).collect();
        let mut tot = self.degree.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut link = vec![0.0; n];
        let mut marked = vec![false; n];
        let mut touched: Vec<usize> = Vec::new();
        let scale = 2.0 / self.m2;
        let mut any = false;
        loop {
            let mut moved = false;
            for &i in &order {
                let ci = comm[i];
                let ki = self.degree[i];
                for &(j, w) in &self.adj[i] {
                    let cj = comm[j];
                    if !marked[cj] {
                        marked[cj] = true;
                        touched.push(cj);
                    }
                    link[cj] += w;
                }
                tot[ci] -= ki;
                let gain = |c: usize, link: &[f64], tot: &[f64]| {
                    scale * (link[c] - resolution * tot[c] * ki / self.m2)
                };
                let stay = gain(ci, &link, &tot);
                let best_other = touched
                    .iter()
                    .filter(|&&c| c != ci)
                    .map(|&c| gain(c, &link, &tot))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut target = ci;
                if best_other > stay + GAIN_THRESHOLD {
                    target = touched
                        .iter()
                        .copied()
                        .filter(|&c| c != ci && gain(c, &link, &tot) >= best_other - GAIN_THRESHOLD)
                        .min()
                        .expect("best_other came from this set");
                }
                tot[target] += ki;
                if target != ci {
                    comm[i] = target;
                    moved = true;
                    any = true;
                }
                for &c in &touched {
                    link[c] = 0.0;
                    marked[c] = false;
                }
                touched.clear();
            }
            if !moved {
                break;
            }
        }
        (any, comm)
    }

    fn aggregate(&self, partition: &Partition) -> LevelGraph {
        let k = partition.community_count();
        let comm = partition.assignment();
        let mut self_weight = vec![0.0; k];
        let mut links: Vec<(usize, usize, f64)> = Vec::new();
        for (i, edges) in self.adj.iter().enumerate() {
            self_weight[comm[i]] += self.self_weight[i];
            for &(j, w) in edges {
                if comm[i] == comm[j] {
                    // each internal edge is seen from both ends
                    self_weight[comm[i]] += w / 2.0;
                } else {
                    links.push((comm[i], comm[j], w));
                }
            }
        }
        links.sort_by_key(|a| (a.0, a.1));
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
        for (a, b, w) in links {
            match adj[a].last_mut() {
                Some(last) if last.0 == b => last.1 += w,
                _ => adj[a].push((b, w)),
            }
        }
        LevelGraph::finish(adj, self_weight)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn triangles() -> WeightedGraph {
        WeightedGraph::new(
            6,
            vec![
                (0, 1, 1.0),
                (1, 2, 1.0),
                (0, 2, 1.0),
                (3, 4, 1.0),
                (4, 5, 1.0),
                (3, 5, 1.0),
            ],
        )
        .unwrap()
    }

    /// All set partitions of `n` nodes as restricted growth strings.
    fn all_partitions(n: usize) -> Vec<Vec<usize>> {
        fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == n {
                out.push(prefix.clone());
                return;
            }
            let next = prefix.iter().max().map_or(0, |m| m + 1);
            for c in 0..=next {
                prefix.push(c);
                rec(prefix, n, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), n, &mut out);
        out
    }

    fn best_by_enumeration(g: &WeightedGraph, resolution: f64) -> (Partition, f64) {
        all_partitions(g.node_count())
            .into_iter()
            .map(|a| {
                let p = Partition::new(a).unwrap();
                let q = modularity(g, &p, resolution).unwrap();
                (p, q)
            })
            .fold(None, |best: Option<(Partition, f64)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            })
            .unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64) -> WeightedGraph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(density) {
                    edges.push((i, j, rng.gen_range(0.5..1.5)));
                }
            }
        }
        WeightedGraph::new(n, edges).unwrap()
    }

    #[test]
    fn one_community_modularity_is_one_minus_resolution() {
        let g = triangles();
        let one = Partition::new(vec![0; 6]).unwrap();
        assert!(modularity(&g, &one, 1.0).unwrap().abs() < 1e-15);
        for gamma in [0.3, 2.0, 5.5] {
            let q = modularity(&g, &one, gamma).unwrap();
            assert!((q - (1.0 - gamma)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_triangles_modularity_is_half() {
        let p = Partition::new(vec![0, 0, 0, 1, 1, 1]).unwrap();
        assert!((modularity(&triangles(), &p, 1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn edgeless_graph_has_zero_modularity() {
        let g = WeightedGraph::new(3, vec![]).unwrap();
        assert_eq!(modularity(&g, &singleton_partition(&g), 1.0).unwrap(), 0.0);
        assert_eq!(louvain(&g, 1.0, 0).community_count(), 3);
    }

    #[test]
    fn louvain_finds_the_two_triangles() {
        let g = triangles();
        let (best, q_best) = best_by_enumeration(&g, 1.0);
        for seed in 0..20 {
            let p = louvain(&g, 1.0, seed);
            assert_eq!(p.groups(), vec![vec![0, 1, 2], vec![3, 4, 5]]);
            assert_eq!(p, best);
            assert!((modularity(&g, &p, 1.0).unwrap() - q_best).abs() < 1e-12);
        }
    }

    #[test]
    fn louvain_matches_exhaustive_optimum_on_small_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut matched = 0;
        let trials = 30;
        for t in 0..trials {
            // two noisy cliques joined by a weak edge
            let mut edges = Vec::new();
            for (a, b) in [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)] {
                edges.push((a, b, rng.gen_range(0.8..1.2)));
            }
            edges.push((
                rng.gen_range(0..3),
                rng.gen_range(3..6),
                rng.gen_range(0.05..0.3),
            ));
            let g = WeightedGraph::new(6, edges).unwrap();
            let (_, q_best) = best_by_enumeration(&g, 1.0);
            let q = modularity(&g, &louvain(&g, 1.0, t), 1.0).unwrap();
            assert!(q <= q_best + 1e-12);
            if (q - q_best).abs() < 1e-9 {
                matched += 1;
            }
        }
        assert_eq!(matched, trials);
    }

    #[test]
    fn single_node_is_one_community() {
        let g = WeightedGraph::new(1, vec![]).unwrap();
        assert_eq!(louvain(&g, 1.0, 3).assignment(), &[0]);
    }

    #[test]
    fn singleton_partition_labels_every_node() {
        for n in [1, 3, 17] {
            let g = WeightedGraph::new(n, vec![]).unwrap();
            let p = singleton_partition(&g);
            assert_eq!(p.assignment(), (0..n).collect::<Vec<_>>().as_slice());
            assert_eq!(p.community_count(), n);
        }
    }

    /// Two planted blocks of 20; returns whether Louvain recovered them.
    fn planted_recovered(seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let same = (i < 20) == (j < 20);
                let p = if same { 0.9 } else { 0.05 };
                if rng.gen_bool(p) {
                    edges.push((i, j, 1.0));
                }
            }
        }
        let g = WeightedGraph::new(n, edges).unwrap();
        let p = louvain(&g, 1.0, seed);
        let truth: Vec<Vec<usize>> = vec![(0..20).collect(), (20..40).collect()];
        p.groups() == truth
    }

    #[test]
    fn planted_partition_is_recovered() {
        let seeds = 100;
        let hits = (0..seeds).filter(|&s| planted_recovered(s)).count();
        assert!(hits as f64 >= 0.95 * seeds as f64, "{hits}/{seeds}");
    }

    #[test]
    fn levels_improve_monotonically_and_beat_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in 0..40 {
            let g = random_graph(&mut rng, 30, 0.2);
            for gamma in [0.5, 1.0, 2.0] {
                let levels = louvain_levels(&g, gamma, t);
                let base = modularity(&g, &singleton_partition(&g), gamma).unwrap();
                let mut prev = base;
                for l in &levels {
                    assert!(l.modularity >= prev - 1e-12);
                    prev = l.modularity;
                }
                let q = modularity(&g, &louvain(&g, gamma, t), gamma).unwrap();
                assert!(q >= base - 1e-12);
            }
        }
    }

    #[test]
    fn resolution_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 0..10 {
            let g = random_graph(&mut rng, 30, 0.5);
            assert_eq!(louvain(&g, 100.0, t).community_count(), 30);
            assert_eq!(louvain(&g, 1e-6, t).community_count(), 1);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = random_graph(&mut rng, 50, 0.15);
        assert_eq!(louvain(&g, 1.0, 42), louvain(&g, 1.0, 42));
    }

    #[test]
    fn graph_validation() {
        assert!(WeightedGraph::new(2, vec![(0, 0, 1.0)]).is_err());
        assert!(WeightedGraph::new(2, vec![(0, 1, 1.0), (1, 0, 2.0)]).is_err());
        assert!(WeightedGraph::new(2, vec![(0, 1, 0.0)]).is_err());
        assert!(WeightedGraph::new(2, vec![(0, 2, 1.0)]).is_err());
        let g =
            WeightedGraph::from_dense(3, &[0.0, 2.0, 0.0, 2.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(g.edges(), &[(0, 1, 2.0), (1, 2, 1.0)]);
        assert!(Partition::new(vec![0, 2]).is_err());
    }
}
