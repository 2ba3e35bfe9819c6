//! Node-attributed graphs, the normalisation operators used by message
//! passing, and structure statistics.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Disjoint train/valid/test node masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub valid: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Masks {
            train: vec![false; n],
            valid: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn train_indices(&self) -> Vec<usize> {
        indices(&self.train)
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        indices(&self.valid)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        indices(&self.test)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.train.len() != n || self.valid.len() != n || self.test.len() != n {
            return Err(Error::Structure(format!("masks must have length {n}")));
        }
        for i in 0..n {
            let hits = self.train[i] as u8 + self.valid[i] as u8 + self.test[i] as u8;
            if hits > 1 {
                return Err(Error::Structure(format!("node {i} is in more than one mask")));
            }
        }
        Ok(())
    }
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Immutable node-attributed graph.
#[derive(Clone, Debug)]
pub struct Graph {
    n_classes: usize,
    adjacency: SparseMatrix,
    features: Tensor,
    labels: Vec<usize>,
    masks: Masks,
    norm_adjacency: SparseMatrix,
    sparse_features: Option<SparseMatrix>,
}

impl Graph {
    pub fn new(
        adjacency: SparseMatrix,
        features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        masks: Masks,
    ) -> Result<Self> {
        let n = features.rows();
        if adjacency.rows() != n || adjacency.cols() != n {
            return Err(Error::Structure(format!(
                "adjacency is {}x{} but there are {n} feature rows",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        if labels.len() != n {
            return Err(Error::Structure(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Structure(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Domain("feature matrix contains NaN or Inf".into()));
        }
        for (r, c, v) in adjacency.triplets() {
            if r == c {
                return Err(Error::Structure(format!("self-loop stored at node {r}")));
            }
            if v != 1.0 {
                return Err(Error::Structure(format!("adjacency entry ({r}, {c}) = {v} is not binary")));
            }
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Structure("adjacency is not symmetric".into()));
        }
        masks.validate(n)?;
        let norm_adjacency = sym_normalize(&adjacency)?;
        let nnz = features.as_slice().iter().filter(|v| **v != 0.0).count();
        let sparse_features =
            (nnz * 4 < features.len()).then(|| SparseMatrix::from_dense(&features));
        Ok(Graph {
            n_classes,
            adjacency,
            features,
            labels,
            masks,
            norm_adjacency,
            sparse_features,
        })
    }

    /// Builds a graph from an undirected edge list (either orientation, no duplicates needed).
    pub fn from_edges(
        n_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        masks: Masks,
    ) -> Result<Self> {
        let adjacency = adjacency_from_edges(n_nodes, edges)?;
        Graph::new(adjacency, features, labels, n_classes, masks)
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    /// `D^{-1/2}(A + I)D^{-1/2}`, cached at construction.
    pub fn norm_adjacency(&self) -> &SparseMatrix {
        &self.norm_adjacency
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// CSR copy of the features when they are mostly zeros.
    pub fn sparse_features(&self) -> Option<&SparseMatrix> {
        self.sparse_features.as_ref()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn with_masks(&self, masks: Masks) -> Result<Graph> {
        masks.validate(self.n_nodes())?;
        let mut g = self.clone();
        g.masks = masks;
        Ok(g)
    }

    /// Undirected edges as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .triplets()
            .into_iter()
            .filter(|&(u, v, _)| u < v)
            .map(|(u, v, _)| (u, v))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// SHA-256 over edges, features, labels and masks; used to derive
    /// per-graph random streams so that equal graphs get equal streams.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.n_nodes() as u64).to_le_bytes());
        h.update((self.n_classes as u64).to_le_bytes());
        for (u, v) in self.edges() {
            h.update((u as u64).to_le_bytes());
            h.update((v as u64).to_le_bytes());
        }
        h.update((self.feature_dim() as u64).to_le_bytes());
        for x in self.features.as_slice() {
            h.update(x.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        for i in 0..self.n_nodes() {
            let tag = (self.masks.train[i] as u8) | (self.masks.valid[i] as u8) << 1 | (self.masks.test[i] as u8) << 2;
            h.update([tag]);
        }
        h.finalize().into()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_classes];
        for &y in &self.labels {
            sizes[y] += 1;
        }
        sizes
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.n_nodes();
        if perm.len() != n {
            return Err(Error::Structure("permutation length mismatch".into()));
        }
        let mut features = Tensor::zeros(n, self.feature_dim());
        let mut labels = vec![0; n];
        let mut masks = Masks::empty(n);
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).copy_from_slice(self.features.row(old));
            labels[new] = self.labels[old];
            masks.train[new] = self.masks.train[old];
            masks.valid[new] = self.masks.valid[old];
            masks.test[new] = self.masks.test[old];
        }
        let edges: Vec<_> = self.edges().iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Graph::from_edges(n, &edges, features, labels, self.n_classes, masks)
    }
}

/// Symmetric binary adjacency from an undirected edge list. Self-loops are
/// rejected; repeated edges collapse.
pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<SparseMatrix> {
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in edges {
        if u == v {
            return Err(Error::Structure(format!("self-loop at node {u}")));
        }
        pairs.push((u, v));
        pairs.push((v, u));
    }
    pairs.sort_unstable();
    pairs.dedup();
    let triplets: Vec<_> = pairs.into_iter().map(|(u, v)| (u, v, 1.0)).collect();
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// `D^{-1/2}(A + I)D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn sym_normalize(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    if !adjacency.is_square() {
        return Err(Error::Structure(format!(
            "adjacency must be square, got {}x{}",
            adjacency.rows(),
            adjacency.cols()
        )));
    }
    let n = adjacency.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|u| {
            let deg: f64 = adjacency.row_iter(u).filter(|&(v, _)| v != u).map(|(_, w)| w).sum();
            1.0 / (deg + 1.0).sqrt()
        })
        .collect();
    let mut triplets = Vec::with_capacity(adjacency.nnz() + n);
    for u in 0..n {
        triplets.push((u, u, inv_sqrt[u] * inv_sqrt[u]));
        for (v, w) in adjacency.row_iter(u) {
            if v != u {
                triplets.push((u, v, w * inv_sqrt[u] * inv_sqrt[v]));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Divides each row by its sum; all-zero rows stay zero.
pub fn row_normalize(m: &Tensor) -> Result<Tensor> {
    if m.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("row_normalize requires nonnegative entries".into()));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(out)
}

/// Sparse counterpart of [`row_normalize`].
pub fn row_normalize_sparse(m: &SparseMatrix) -> Result<SparseMatrix> {
    if m.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("row_normalize requires nonnegative entries".into()));
    }
    let mut triplets = Vec::with_capacity(m.nnz());
    for r in 0..m.rows() {
        let s: f64 = m.row_iter(r).map(|(_, v)| v).sum();
        for (c, v) in m.row_iter(r) {
            triplets.push((r, c, if s > 0.0 { v / s } else { 0.0 }));
        }
    }
    SparseMatrix::from_triplets(m.rows(), m.cols(), &triplets)
}

/// A structure to measure: an explicit (possibly weighted) adjacency, or
/// the latent graph `Γ Γᵀ` given by a node-pivot weight matrix.
#[derive(Clone, Copy, Debug)]
pub enum Structure<'a> {
    Adjacency(&'a SparseMatrix),
    PivotFactor(&'a Tensor),
}

/// Per-node neighbour mass by class (`N x C`), self-pairs excluded.
pub fn neighbor_class_mass(labels: &[usize], n_classes: usize, structure: Structure<'_>) -> Result<Tensor> {
    let n = labels.len();
    let mut mass = Tensor::zeros(n, n_classes);
    match structure {
        Structure::Adjacency(adj) => {
            if adj.rows() != n || adj.cols() != n {
                return Err(Error::Shape("structure does not match node count".into()));
            }
            for u in 0..n {
                let row = mass.row_mut(u);
                for (v, w) in adj.row_iter(u) {
                    if v != u {
                        row[labels[v]] += w;
                    }
                }
            }
        }
        Structure::PivotFactor(gamma) => {
            if gamma.rows() != n {
                return Err(Error::Shape("pivot factor does not match node count".into()));
            }
            let p = gamma.cols();
            // pivot-by-class mass: Γᵀ Y
            let mut pivot_mass = Tensor::zeros(p, n_classes);
            for v in 0..n {
                for (q, &g) in gamma.row(v).iter().enumerate() {
                    if g != 0.0 {
                        pivot_mass.row_mut(q)[labels[v]] += g;
                    }
                }
            }
            for u in 0..n {
                let gu = gamma.row(u);
                let row = mass.row_mut(u);
                let mut self_weight = 0.0;
                for (q, &g) in gu.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    self_weight += g * g;
                    for (m, &pm) in row.iter_mut().zip(pivot_mass.row(q)) {
                        *m += g * pm;
                    }
                }
                row[labels[u]] = (row[labels[u]] - self_weight).max(0.0);
            }
        }
    }
    Ok(mass)
}

/// Class-adjusted homophily:
/// `(1/(C-1)) Σ_k max(0, h_k - |C_k|/N)` where `h_k` is the share of
/// neighbour mass of class-`k` nodes that lands in class `k`.
pub fn homophily_ratio(g: &Graph, structure: Option<Structure<'_>>) -> Result<f64> {
    let structure = structure.unwrap_or(Structure::Adjacency(g.adjacency()));
    homophily_from_labels(g.labels(), g.n_classes(), structure)
}

pub fn homophily_from_labels(labels: &[usize], n_classes: usize, structure: Structure<'_>) -> Result<f64> {
    if n_classes < 2 {
        return Err(Error::Domain("homophily needs at least two classes".into()));
    }
    let mass = neighbor_class_mass(labels, n_classes, structure)?;
    let n = labels.len() as f64;
    let mut same = vec![0.0; n_classes];
    let mut total = vec![0.0; n_classes];
    let mut sizes = vec![0usize; n_classes];
    for (u, &y) in labels.iter().enumerate() {
        same[y] += mass.get(u, y);
        total[y] += mass.row(u).iter().sum::<f64>();
        sizes[y] += 1;
    }
    let mut acc = 0.0;
    for k in 0..n_classes {
        let h_k = if total[k] > 0.0 { same[k] / total[k] } else { 0.0 };
        acc += (h_k - sizes[k] as f64 / n).max(0.0);
    }
    Ok(acc / (n_classes - 1) as f64)
}

/// Size-weighted within-class variance of neighbour label distributions.
/// Nodes without neighbour mass are skipped.
pub fn neighborhood_variance(g: &Graph, structure: Structure<'_>) -> Result<f64> {
    neighborhood_variance_from_labels(g.labels(), g.n_classes(), structure)
}

pub fn neighborhood_variance_from_labels(
    labels: &[usize],
    n_classes: usize,
    structure: Structure<'_>,
) -> Result<f64> {
    let mass = neighbor_class_mass(labels, n_classes, structure)?;
    let n = labels.len();
    let mut dists: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for u in 0..n {
        let row = mass.row(u);
        let s: f64 = row.iter().sum();
        dists.push((s > 0.0).then(|| row.iter().map(|v| v / s).collect()));
    }
    let mut total = 0.0;
    for k in 0..n_classes {
        let members: Vec<&Vec<f64>> = labels
            .iter()
            .zip(&dists)
            .filter(|(&y, _)| y == k)
            .filter_map(|(_, d)| d.as_ref())
            .collect();
        let class_size = labels.iter().filter(|&&y| y == k).count();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; n_classes];
        for d in &members {
            for (m, v) in mean.iter_mut().zip(d.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        let var: f64 = members
            .iter()
            .map(|d| d.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / members.len() as f64;
        total += class_size as f64 / n as f64 * var;
    }
    Ok(total)
}

/// Removes `⌊fraction · |E|⌋` undirected edges chosen uniformly without
/// replacement.
pub fn delete_edges(g: &Graph, fraction: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain(format!("edge fraction {fraction} outside [0, 1]")));
    }
    let edges = g.edges();
    let n_remove = (fraction * edges.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; edges.len()];
    for i in index::sample(&mut rng, edges.len(), n_remove) {
        drop[i] = true;
    }
    let kept: Vec<_> = edges
        .into_iter()
        .zip(drop)
        .filter_map(|(e, d)| (!d).then_some(e))
        .collect();
    let adjacency = adjacency_from_edges(g.n_nodes(), &kept)?;
    Graph::new(
        adjacency,
        g.features.clone(),
        g.labels.clone(),
        g.n_classes,
        g.masks.clone(),
    )
}

/// Adds `⌊fraction·|E|⌋` new undirected edges between uniformly random
/// distinct, previously unconnected node pairs.
pub fn add_random_edges(g: &Graph, fraction: f64, seed: u64) -> Result<Graph> {
    if fraction < 0.0 || !fraction.is_finite() {
        return Err(Error::Domain(format!("edge fraction {fraction} must be a nonnegative number")));
    }
    let n = g.n_nodes();
    let mut edges = g.edges();
    let n_add = (fraction * edges.len() as f64).floor() as usize;
    let capacity = n * n.saturating_sub(1) / 2;
    if edges.len() + n_add > capacity {
        return Err(Error::Domain(format!(
            "cannot add {n_add} edges to a graph with {} of {capacity} possible",
            edges.len()
        )));
    }
    let mut present: std::collections::HashSet<(usize, usize)> = edges.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut added = 0;
    while added < n_add {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let e = (u.min(v), u.max(v));
        if present.insert(e) {
            edges.push(e);
            added += 1;
        }
    }
    let adjacency = adjacency_from_edges(n, &edges)?;
    Graph::new(
        adjacency,
        g.features.clone(),
        g.labels.clone(),
        g.n_classes,
        g.masks.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)], labels: Vec<usize>, c: usize) -> Graph {
        Graph::from_edges(n, edges, Tensor::ones(n, 1), labels, c, Masks::empty(n)).unwrap()
    }

    #[test]
    fn sym_normalize_isolated_node() {
        let a = SparseMatrix::from_triplets(1, 1, &[]).unwrap();
        assert_eq!(sym_normalize(&a).unwrap().to_dense().to_rows(), vec![vec![1.0]]);
    }

    #[test]
    fn sym_normalize_single_edge() {
        let a = adjacency_from_edges(2, &[(0, 1)]).unwrap();
        let d = sym_normalize(&a).unwrap().to_dense();
        for r in 0..2 {
            for c in 0..2 {
                assert!((d.get(r, c) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sym_normalize_path_matches_dense_oracle() {
        let a = adjacency_from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let got = sym_normalize(&a).unwrap().to_dense();
        // dense oracle: D^{-1/2} (A + I) D^{-1/2}
        let mut a_hat = a.to_dense();
        for i in 0..3 {
            a_hat.set(i, i, 1.0);
        }
        let mut d_inv = Tensor::zeros(3, 3);
        for i in 0..3 {
            d_inv.set(i, i, 1.0 / a_hat.row(i).iter().sum::<f64>().sqrt());
        }
        let oracle = d_inv.matmul(&a_hat).unwrap().matmul(&d_inv).unwrap();
        assert!(got.max_abs_diff(&oracle) < 1e-15);
        assert!((got.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((got.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((got.get(1, 2) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sym_normalize_rejects_non_square() {
        let a = SparseMatrix::from_triplets(2, 3, &[]).unwrap();
        assert!(matches!(sym_normalize(&a), Err(Error::Structure(_))));
    }

    #[test]
    fn row_normalize_examples() {
        let t = |rows: &[Vec<f64>]| Tensor::from_rows(rows).unwrap();
        assert_eq!(row_normalize(&t(&[vec![2.0, 2.0]])).unwrap().to_rows(), vec![vec![0.5, 0.5]]);
        assert_eq!(row_normalize(&t(&[vec![0.0, 0.0]])).unwrap().to_rows(), vec![vec![0.0, 0.0]]);
        assert_eq!(
            row_normalize(&t(&[vec![1.0, 3.0], vec![4.0, 0.0]])).unwrap().to_rows(),
            vec![vec![0.25, 0.75], vec![1.0, 0.0]]
        );
        assert!(matches!(row_normalize(&t(&[vec![-1.0, 2.0]])), Err(Error::Domain(_))));
    }

    #[test]
    fn homophily_perfect_two_class() {
        let g = graph(4, &[(0, 1), (2, 3)], vec![0, 0, 1, 1], 2);
        assert!((homophily_ratio(&g, None).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn homophily_needs_two_classes() {
        let g = graph(2, &[(0, 1)], vec![0, 0], 1);
        assert!(matches!(homophily_ratio(&g, None), Err(Error::Domain(_))));
    }

    #[test]
    fn pivot_factor_mass_matches_dense_product() {
        let gamma = Tensor::from_rows(&[
            vec![0.2, 0.9],
            vec![0.5, 0.0],
            vec![0.7, 0.3],
            vec![0.1, 0.4],
        ])
        .unwrap();
        let labels = vec![0, 1, 1, 0];
        let dense = gamma.matmul_t(&gamma).unwrap();
        let mut trip = Vec::new();
        for u in 0..4 {
            for v in 0..4 {
                if u != v && dense.get(u, v) != 0.0 {
                    trip.push((u, v, dense.get(u, v)));
                }
            }
        }
        let adj = SparseMatrix::from_triplets(4, 4, &trip).unwrap();
        let a = neighbor_class_mass(&labels, 2, Structure::Adjacency(&adj)).unwrap();
        let b = neighbor_class_mass(&labels, 2, Structure::PivotFactor(&gamma)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn variance_zero_when_distributions_identical() {
        // two disjoint 4-cycles alternating classes: every node sees only the other class
        let g = graph(
            8,
            &[(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4)],
            vec![0, 1, 0, 1, 0, 1, 0, 1],
            2,
        );
        let v = neighborhood_variance(&g, Structure::Adjacency(g.adjacency())).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn variance_star_leaves() {
        let g = graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)], vec![1, 0, 0, 0, 0], 2);
        let v = neighborhood_variance(&g, Structure::Adjacency(g.adjacency())).unwrap();
        // leaves all see p = (0, 1); the centre is alone in its class
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn variance_four_node_brute_force() {
        // 0-1, 0-2, 1-3, 2-3, 0-3 ; classes [0, 0, 1, 1]
        let g = graph(4, &[(0, 1), (0, 2), (1, 3), (2, 3), (0, 3)], vec![0, 0, 1, 1], 2);
        // hand-built neighbour distributions
        let p = [
            [1.0 / 3.0, 2.0 / 3.0], // node 0: 1(c0), 2(c1), 3(c1)
            [0.5, 0.5],             // node 1: 0(c0), 3(c1)
            [0.5, 0.5],             // node 2: 0(c0), 3(c1)
            [2.0 / 3.0, 1.0 / 3.0], // node 3: 1(c0), 2(c1), 0(c0)
        ];
        let sq = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        let mean = |a: [f64; 2], b: [f64; 2]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let m0 = mean(p[0], p[1]);
        let m1 = mean(p[2], p[3]);
        let var0 = (sq(p[0], m0) + sq(p[1], m0)) / 2.0;
        let var1 = (sq(p[2], m1) + sq(p[3], m1)) / 2.0;
        let oracle = 0.5 * var0 + 0.5 * var1;
        let got = neighborhood_variance(&g, Structure::Adjacency(g.adjacency())).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!(oracle > 0.0);
    }

    #[test]
    fn delete_edges_counts() {
        let edges: Vec<_> = (0..10).map(|i| (i, i + 1)).collect();
        let g = graph(11, &edges, vec![0; 11], 1);
        assert_eq!(delete_edges(&g, 0.0, 1).unwrap().edges(), g.edges());
        assert_eq!(delete_edges(&g, 1.0, 1).unwrap().n_edges(), 0);
        let half = delete_edges(&g, 0.5, 7).unwrap();
        assert_eq!(half.n_edges(), 5);
        assert!(half.adjacency().is_symmetric());
        assert_eq!(delete_edges(&g, 0.5, 7).unwrap().edges(), half.edges());
        assert!(delete_edges(&g, 1.5, 7).is_err());
    }
}
