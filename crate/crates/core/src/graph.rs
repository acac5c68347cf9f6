//! Mutual-kNN affinity graphs, symmetric normalization and query/gallery blocks.
//!
//! `FGG1` layout, little-endian: magic `FGG1`, `u32` node count, `u32` k,
//! `f32` gamma, 32-byte SHA-256 of the source feature blob, `u32` nnz, then
//! `u32` row pointers (node count + 1), `u32` column indices, `f32` weights,
//! and one `u8` domain tag per node (0 source, 1 target).

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::features::{score_from_cosine, Domain, FeatureSet};
use crate::sparse::CsrMatrix;

/// Neighbors per node used at the operating point.
pub const DEFAULT_K: usize = 50;

/// Raw vectors with cached squared norms; cosine is `x.y / sqrt(|x|^2 |y|^2)`.
#[derive(Debug, Clone)]
pub struct CosineSpace {
    vectors: Vec<Vec<f64>>,
    sq_norms: Vec<f64>,
}

impl CosineSpace {
    pub fn new(set: &FeatureSet) -> Result<Self> {
        let vectors: Vec<Vec<f64>> = set
            .records()
            .iter()
            .map(|r| r.vector.iter().map(|&x| f64::from(x)).collect())
            .collect();
        let sq_norms: Vec<f64> = vectors
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum())
            .collect();
        if let Some(index) = sq_norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroVector { index });
        }
        Ok(CosineSpace { vectors, sq_norms })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    #[inline]
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let dot: f64 = self.vectors[i]
            .iter()
            .zip(&self.vectors[j])
            .map(|(a, b)| a * b)
            .sum();
        dot / (self.sq_norms[i] * self.sq_norms[j]).sqrt()
    }
}

/// Descending similarity, ties broken by ascending node id.
#[inline]
pub fn neighbor_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Source of k-nearest-neighbor lists. Exact search is the default; an
/// approximate index can be plugged in behind the same contract.
pub trait NeighborSearch: Sync {
    /// For every node, its `k` nearest other nodes as `(node, cosine)` in
    /// [`neighbor_order`].
    fn knn(&self, space: &CosineSpace, k: usize) -> Vec<Vec<(usize, f64)>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExactSearch;

/// `nn` nearest nodes to `query` (excluding itself) by exhaustive scan.
pub fn nearest(space: &CosineSpace, query: usize, nn: usize) -> Vec<(usize, f64)> {
    let mut cands: Vec<(usize, f64)> = (0..space.len())
        .filter(|&j| j != query)
        .map(|j| (j, space.cosine(query, j)))
        .collect();
    if nn < cands.len() {
        cands.select_nth_unstable_by(nn, neighbor_order);
        cands.truncate(nn);
    }
    cands.sort_by(neighbor_order);
    cands
}

impl NeighborSearch for ExactSearch {
    fn knn(&self, space: &CosineSpace, k: usize) -> Vec<Vec<(usize, f64)>> {
        (0..space.len())
            .into_par_iter()
            .map(|i| nearest(space, i, k))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GraphDiagnostics {
    /// Undirected edges kept after the mutuality filter.
    pub edges: usize,
    /// Nodes without any mutual neighbor.
    pub isolated_nodes: usize,
}

/// Sparse symmetric affinity `A`: `a_ij = s(x_i, x_j)` for mutual neighbors, 0 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub k: usize,
    pub gamma: f64,
    pub matrix: CsrMatrix,
    pub domains: Vec<Domain>,
    /// Checksum of the feature set the graph was built from.
    pub source_checksum: [u8; 32],
}

impl AffinityGraph {
    pub fn node_count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn diagnostics(&self) -> GraphDiagnostics {
        let n = self.node_count();
        GraphDiagnostics {
            edges: self.matrix.nnz() / 2,
            isolated_nodes: (0..n).filter(|&i| self.matrix.row_len(i) == 0).count(),
        }
    }

    pub fn to_fgg1(&self) -> Vec<u8> {
        let m = &self.matrix;
        let mut w = Writer::default();
        w.magic(b"FGG1")
            .u32(self.node_count() as u32)
            .u32(self.k as u32)
            .f32(self.gamma as f32)
            .bytes(&self.source_checksum)
            .u32(m.nnz() as u32);
        for &p in m.row_ptr() {
            w.u32(p as u32);
        }
        for &c in m.col_idx() {
            w.u32(c as u32);
        }
        for &v in m.values() {
            w.f32(v as f32);
        }
        for d in &self.domains {
            w.u8(match d {
                Domain::Source => 0,
                Domain::Target => 1,
            });
        }
        w.buf
    }

    pub fn from_fgg1(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "FGG1");
        r.expect_magic(b"FGG1")?;
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let gamma = f64::from(r.f32()?);
        let source_checksum = r.array32()?;
        let nnz = r.u32()? as usize;
        let mut row_ptr = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            row_ptr.push(r.u32()? as usize);
        }
        let mut col_idx = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            col_idx.push(r.u32()? as usize);
        }
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            values.push(f64::from(r.f32()?));
        }
        let mut domains = Vec::with_capacity(n);
        for _ in 0..n {
            domains.push(match r.u8()? {
                0 => Domain::Source,
                1 => Domain::Target,
                t => return Err(Error::BadFormat(format!("FGG1: unknown domain tag {t}"))),
            });
        }
        r.finish()?;
        let sane = row_ptr.first() == Some(&0)
            && row_ptr.last() == Some(&nnz)
            && row_ptr.windows(2).all(|w| w[0] <= w[1])
            && col_idx.iter().all(|&c| c < n)
            && (0..n).all(|i| col_idx[row_ptr[i]..row_ptr[i + 1]].windows(2).all(|w| w[0] < w[1]))
            && values.iter().all(|v| v.is_finite() && *v > 0.0);
        if !sane {
            return Err(Error::BadFormat("FGG1: malformed CSR arrays".into()));
        }
        let matrix = CsrMatrix::from_raw(n, n, row_ptr, col_idx, values);
        if !matrix.is_symmetric() || (0..n).any(|i| matrix.get(i, i) != 0.0) {
            return Err(Error::BadFormat("FGG1: affinity must be symmetric with zero diagonal".into()));
        }
        Ok(AffinityGraph {
            k,
            gamma,
            matrix,
            domains,
            source_checksum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_fgg1())
    }

    pub fn load(path: &Path) -> Result<Self> {
        AffinityGraph::from_fgg1(&binio::read_file(path)?)
    }
}

pub fn build_mutual_knn(set: &FeatureSet, k: usize, gamma: f64) -> Result<AffinityGraph> {
    build_mutual_knn_with(set, k, gamma, &ExactSearch)
}

/// Mutual-kNN affinity over the joint set of both domains.
///
/// Weights are rounded to `f32` so an in-memory graph equals its `FGG1` reload.
pub fn build_mutual_knn_with(
    set: &FeatureSet,
    k: usize,
    gamma: f64,
    search: &dyn NeighborSearch,
) -> Result<AffinityGraph> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "graph needs at least 2 nodes, got {n}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if k >= n {
        return Err(Error::KTooLarge { k, nodes: n });
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let space = CosineSpace::new(set)?;
    let lists = search.knn(&space, k);
    let mut sorted: Vec<Vec<usize>> = lists
        .iter()
        .map(|l| l.iter().map(|&(j, _)| j).collect())
        .collect();
    for l in &mut sorted {
        l.sort_unstable();
    }

    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            lists[i]
                .iter()
                .filter(|&&(j, _)| sorted[j].binary_search(&i).is_ok())
                .filter_map(|&(j, _)| {
                    // symmetric in (i, j): cosine() sums the same products either way
                    let w = score_from_cosine(space.cosine(i.min(j), i.max(j)), gamma) as f32;
                    (w > 0.0).then_some((j, f64::from(w)))
                })
                .collect()
        })
        .collect();
    Ok(AffinityGraph {
        k,
        gamma,
        matrix: CsrMatrix::from_rows(n, rows),
        domains: set.domains(),
        source_checksum: set.checksum(),
    })
}

/// `S = D^{-1/2} A D^{-1/2}`; rows and columns of isolated nodes are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGraph {
    pub matrix: CsrMatrix,
    pub degrees: Vec<f64>,
    pub isolated: Vec<usize>,
}

impl NormalizedGraph {
    pub fn node_count(&self) -> usize {
        self.matrix.rows()
    }
}

pub fn normalize(graph: &AffinityGraph) -> NormalizedGraph {
    let a = &graph.matrix;
    let n = a.rows();
    let degrees: Vec<f64> = (0..n).map(|i| a.row_sum(i)).collect();
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let rows = (0..n)
        .map(|i| {
            a.row(i)
                .map(|(j, v)| (j, v * (inv_sqrt[i] * inv_sqrt[j])))
                .collect()
        })
        .collect();
    NormalizedGraph {
        matrix: CsrMatrix::from_rows(n, rows),
        isolated: (0..n).filter(|&i| degrees[i] == 0.0).collect(),
        degrees,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Gallery,
}

/// Assignment of every node to the query or gallery side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    roles: Vec<Role>,
}

impl Partition {
    pub fn new(roles: Vec<Role>) -> Self {
        Partition { roles }
    }

    /// Nodes of `query_domain` become queries, the rest the gallery.
    pub fn by_domain(domains: &[Domain], query_domain: Domain) -> Self {
        Partition {
            roles: domains
                .iter()
                .map(|&d| if d == query_domain { Role::Query } else { Role::Gallery })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn role(&self, node: usize) -> Role {
        self.roles[node]
    }

    pub fn nodes(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }
}

/// The four blocks of `S` under a partition. Local indices follow ascending node order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView {
    pub query_nodes: Vec<usize>,
    pub gallery_nodes: Vec<usize>,
    pub s_qq: CsrMatrix,
    pub s_qd: CsrMatrix,
    pub s_dq: CsrMatrix,
    pub s_dd: CsrMatrix,
}

pub fn split_blocks(s: &NormalizedGraph, partition: &Partition) -> Result<BlockView> {
    let n = s.node_count();
    if partition.len() != n {
        return Err(Error::BadPartition(format!(
            "partition covers {} nodes, graph has {n}",
            partition.len()
        )));
    }
    let query_nodes = partition.nodes(Role::Query);
    let gallery_nodes = partition.nodes(Role::Gallery);
    if query_nodes.is_empty() || gallery_nodes.is_empty() {
        return Err(Error::BadPartition(format!(
            "{} queries and {} gallery nodes; both sides must be non-empty",
            query_nodes.len(),
            gallery_nodes.len()
        )));
    }
    let m = &s.matrix;
    let s_qd = m.select(&query_nodes, &gallery_nodes);
    Ok(BlockView {
        s_qq: m.select(&query_nodes, &query_nodes),
        s_dq: s_qd.transpose(),
        s_qd,
        s_dd: m.select(&gallery_nodes, &gallery_nodes),
        query_nodes,
        gallery_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureRecord;
    use crate::ids::FragmentId;

    fn set_from(vectors: &[Vec<f32>], domains: &[Domain]) -> FeatureSet {
        let records = vectors
            .iter()
            .zip(domains)
            .enumerate()
            .map(|(i, (v, &domain))| FeatureRecord {
                id: FragmentId::new(i as u32, 0, 0),
                domain,
                vector: v.clone(),
            })
            .collect();
        FeatureSet::new(vectors[0].len(), records).unwrap()
    }

    fn angle(theta_deg: f64) -> Vec<f32> {
        let t = theta_deg.to_radians();
        vec![t.cos() as f32, t.sin() as f32]
    }

    #[test]
    fn three_collinear_points_keep_only_mutual_edge() {
        // collinear in R^3 with p1 in the middle; p1 is equally similar to p0 and p2
        let p = [vec![1.0f32, 0.0, 1.0], vec![0.0, 0.0, 1.0], vec![-1.0, 0.0, 1.0]];
        let set = set_from(&p, &[Domain::Source; 3]);
        let space = CosineSpace::new(&set).unwrap();
        assert_eq!(space.cosine(1, 0), space.cosine(1, 2));

        // brute-force NN lists by exhaustive sort
        let nn: Vec<usize> = (0..3)
            .map(|i| {
                let mut c: Vec<(usize, f64)> = (0..3).filter(|&j| j != i).map(|j| (j, space.cosine(i, j))).collect();
                c.sort_by(neighbor_order);
                c[0].0
            })
            .collect();
        assert_eq!(nn, vec![1, 0, 1]);

        let g = build_mutual_knn(&set, 1, 3.0).unwrap();
        let edges: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| g.matrix.row(i).map(move |(j, _)| (i, j)).collect::<Vec<_>>())
            .collect();
        assert_eq!(edges, vec![(0, 1), (1, 0)]);
        assert_eq!(g.diagnostics().isolated_nodes, 1);
    }

    #[test]
    fn full_k_gives_dense_similarity() {
        let vectors: Vec<Vec<f32>> = (0..6).map(|i| angle(i as f64 * 13.0)).collect();
        let set = set_from(&vectors, &[Domain::Source; 6]);
        let g = build_mutual_knn(&set, 5, 3.0).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j {
                    0.0
                } else {
                    let s = crate::features::similarity(&vectors[i], &vectors[j], 3.0).unwrap();
                    f64::from(s as f32)
                };
                assert_eq!(g.matrix.get(i, j), want, "({i},{j})");
            }
        }
    }

    #[test]
    fn k_too_large() {
        let set = set_from(&[angle(0.0), angle(1.0)], &[Domain::Source, Domain::Target]);
        assert_eq!(build_mutual_knn(&set, 2, 3.0).unwrap_err().code(), "k-too-large");
    }

    #[test]
    fn normalize_two_nodes() {
        let g = AffinityGraph {
            k: 1,
            gamma: 1.0,
            matrix: CsrMatrix::from_rows(3, vec![vec![(1, 0.5)], vec![(0, 0.5)], vec![]]),
            domains: vec![Domain::Source, Domain::Target, Domain::Target],
            source_checksum: [0; 32],
        };
        let s = normalize(&g);
        assert_eq!(s.degrees, vec![0.5, 0.5, 0.0]);
        assert!((s.matrix.get(0, 1) - 1.0).abs() < 1e-15);
        assert_eq!(s.isolated, vec![2]);
        assert_eq!(s.matrix.row_len(2), 0);
    }

    #[test]
    fn blocks_shape_and_transpose() {
        let vectors: Vec<Vec<f32>> = (0..5).map(|i| angle(i as f64 * 9.0)).collect();
        let domains = [Domain::Source, Domain::Target, Domain::Source, Domain::Target, Domain::Target];
        let set = set_from(&vectors, &domains);
        let s = normalize(&build_mutual_knn(&set, 2, 3.0).unwrap());
        let blocks = split_blocks(&s, &Partition::by_domain(&domains, Domain::Source)).unwrap();
        assert_eq!((blocks.s_dd.rows(), blocks.s_dd.cols()), (3, 3));
        assert_eq!((blocks.s_dq.rows(), blocks.s_dq.cols()), (3, 2));
        assert_eq!(blocks.s_dq, blocks.s_qd.transpose());
        assert_eq!(blocks.query_nodes, vec![0, 2]);

        let bad = Partition::by_domain(&[Domain::Source; 5], Domain::Source);
        assert_eq!(split_blocks(&s, &bad).unwrap_err().code(), "bad-partition");
        let short = Partition::new(vec![Role::Query]);
        assert_eq!(split_blocks(&s, &short).unwrap_err().code(), "bad-partition");
    }

    #[test]
    fn fgg1_round_trip() {
        let vectors: Vec<Vec<f32>> = (0..8).map(|i| angle(i as f64 * 7.0)).collect();
        let domains: Vec<Domain> = (0..8)
            .map(|i| if i % 2 == 0 { Domain::Source } else { Domain::Target })
            .collect();
        let set = set_from(&vectors, &domains);
        let g = build_mutual_knn(&set, 3, 3.0).unwrap();
        let bytes = g.to_fgg1();
        assert_eq!(&bytes[..4], b"FGG1");
        assert_eq!(AffinityGraph::from_fgg1(&bytes).unwrap(), g);
        assert!(AffinityGraph::from_fgg1(&bytes[..bytes.len() - 1]).is_err());
    }
}
