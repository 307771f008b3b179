//! Geodesic distances on point clouds, approximated by shortest paths on a
//! symmetric k-nearest-neighbour graph.

pub mod cache;
pub mod knn;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::pcloud::{dist, PointCloud};

pub use cache::{cache_read, cache_write, CACHE_MAGIC, CACHE_VERSION};

/// Neighbours per point used by default when building the graph.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum GeodesyError {
    #[error("k = {k} must be in 1..{n}")]
    KTooLarge { k: usize, n: usize },
    #[error("points {i} and {j} coincide; zero-length edges are not allowed")]
    CoincidentPoints { i: usize, j: usize },
    #[error("invalid edge ({i}, {j}, {weight}) for a graph of {n} nodes")]
    InvalidEdge { i: usize, j: usize, weight: f64, n: usize },
    #[error("neighbour graph is disconnected: component sizes {component_sizes:?}")]
    DisconnectedGraph { component_sizes: Vec<usize> },
    #[error("clouds differ in size ({a} vs {b}) or correspondence is invalid")]
    CloudSizeMismatch { a: usize, b: usize },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes {found:?}")]
    BadMagic { path: std::path::PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported cache version {version}")]
    UnsupportedVersion { path: std::path::PathBuf, version: u32 },
    #[error("{path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: std::path::PathBuf,
        expected: u64,
        found: u64,
    },
}

/// Undirected weighted graph stored as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl NeighborGraph {
    /// Builds a graph from undirected edges; duplicates keep the smallest weight.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GeodesyError> {
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j, weight) in edges {
            if i >= n || j >= n || i == j || !(weight > 0.0 && weight.is_finite()) {
                return Err(GeodesyError::InvalidEdge { i, j, weight, n });
            }
            adjacency[i].push((j, weight));
            adjacency[j].push((i, weight));
        }
        for list in &mut adjacency {
            list.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            list.dedup_by_key(|e| e.0);
        }
        Ok(Self { adjacency })
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.adjacency[i]
            .binary_search_by_key(&j, |e| e.0)
            .ok()
            .map(|pos| self.adjacency[i][pos].1)
    }

    /// Sizes of the connected components, largest first.
    pub fn component_sizes(&self) -> Vec<usize> {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for root in 0..n {
            if label[root] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            label[root] = id;
            stack.push(root);
            while let Some(u) = stack.pop() {
                size += 1;
                for &(v, _) in &self.adjacency[u] {
                    if label[v] == usize::MAX {
                        label[v] = id;
                        stack.push(v);
                    }
                }
            }
            sizes.push(size);
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }

    pub fn is_connected(&self) -> bool {
        self.component_sizes().len() <= 1
    }
}

/// Links every point to its `k` Euclidean nearest neighbours (ties to the
/// lower index) and symmetrizes by union.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<NeighborGraph, GeodesyError> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(GeodesyError::KTooLarge { k, n });
    }
    let pts = cloud.points();
    let neighbors = knn::knn_all(pts, k);
    let mut edges = Vec::with_capacity(n * k);
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            let w = dist(&pts[i.min(j)], &pts[i.max(j)]);
            if w == 0.0 {
                return Err(GeodesyError::CoincidentPoints { i: i.min(j), j: i.max(j) });
            }
            edges.push((i, j, w));
        }
    }
    NeighborGraph::from_edges(n, &edges)
}

/// Dense `N×N` matrix of geodesic (shortest-path) distances.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicMatrix {
    d: Array2<f64>,
}

impl GeodesicMatrix {
    /// Wraps a square matrix. No metric properties are checked.
    pub fn from_array(d: Array2<f64>) -> Self {
        assert!(d.is_square(), "geodesic matrix must be square");
        Self { d }
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.d
    }

    pub fn into_array(self) -> Array2<f64> {
        self.d
    }

    pub fn max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    /// Rows and columns selected by `indices` (a sub-matrix on a subset of points).
    pub fn select(&self, indices: &[usize]) -> GeodesicMatrix {
        let m = indices.len();
        GeodesicMatrix {
            d: Array2::from_shape_fn((m, m), |(a, b)| self.d[[indices[a], indices[b]]]),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(graph: &NeighborGraph, source: usize, out: &mut [f64]) {
    out.fill(f64::INFINITY);
    out[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((Dist(0.0), source)));
    while let Some(Reverse((Dist(d), u))) = heap.pop() {
        if d > out[u] {
            continue;
        }
        for &(v, w) in graph.neighbors(u) {
            let nd = d + w;
            if nd < out[v] {
                out[v] = nd;
                heap.push(Reverse((Dist(nd), v)));
            }
        }
    }
}

/// All-pairs shortest paths: one Dijkstra per source, in parallel. The
/// result is symmetrized with `min(d_ij, d_ji)` so floating-point summation
/// order cannot break exact symmetry.
pub fn shortest_paths(graph: &NeighborGraph) -> Result<GeodesicMatrix, GeodesyError> {
    let component_sizes = graph.component_sizes();
    if component_sizes.len() > 1 {
        return Err(GeodesyError::DisconnectedGraph { component_sizes });
    }
    let n = graph.n();
    let mut d = Array2::<f64>::zeros((n, n));
    d.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(src, row)| dijkstra(graph, src, row));
    for i in 0..n {
        for j in 0..i {
            let m = d[[i, j]].min(d[[j, i]]);
            d[[i, j]] = m;
            d[[j, i]] = m;
        }
    }
    Ok(GeodesicMatrix { d })
}

/// Geodesics with the neighbour count raised by 2 up to `retries` times
/// while the graph stays disconnected. Returns the `k` that worked.
pub fn geodesics_with_retry(
    cloud: &PointCloud,
    k: usize,
    retries: usize,
) -> Result<(GeodesicMatrix, usize), GeodesyError> {
    let mut k = k;
    let mut attempt = 0;
    loop {
        let graph = build_knn_graph(cloud, k.min(cloud.len() - 1))?;
        match shortest_paths(&graph) {
            Ok(d) => return Ok((d, k)),
            Err(GeodesyError::DisconnectedGraph { .. }) if attempt < retries && k + 2 < cloud.len() => {
                attempt += 1;
                k += 2;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShortcutOptions {
    pub k: usize,
    /// Minimum relative change `|d_b - d_a| / max(d_a, d_b)` reported.
    pub threshold: f64,
    /// Pairs with `max(d_a, d_b)` below this fraction of the first frame's
    /// geodesic diameter are ignored; their relative change is dominated by
    /// graph discretization.
    pub min_fraction: f64,
}

impl Default for ShortcutOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            threshold: 0.25,
            min_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShortcutPair {
    pub i: usize,
    pub j: usize,
    pub before: f64,
    pub after: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShortcutReport {
    pub options: ShortcutOptions,
    pub pairs_considered: usize,
    /// Flagged pairs, indexed in the first cloud, with `i < j`.
    pub pairs: Vec<ShortcutPair>,
}

impl ShortcutReport {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Compares geodesics of two corresponding frames and flags pairs whose
/// distance changed sharply, which points at surfaces in near-contact
/// (spurious graph edges) in one of the frames.
pub fn shortcut_diagnostic(
    a: &PointCloud,
    b: &PointCloud,
    correspondence: &[usize],
    options: ShortcutOptions,
) -> Result<ShortcutReport, GeodesyError> {
    let n = a.len();
    if b.len() != n || correspondence.len() != n || correspondence.iter().any(|&j| j >= n) {
        return Err(GeodesyError::CloudSizeMismatch { a: n, b: b.len() });
    }
    let da = shortest_paths(&build_knn_graph(a, options.k)?)?;
    let db = shortest_paths(&build_knn_graph(b, options.k)?)?;
    let floor = options.min_fraction * da.max();
    let mut considered = 0;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let before = da.get(i, j);
            let after = db.get(correspondence[i], correspondence[j]);
            let scale = before.max(after);
            if scale < floor || scale == 0.0 {
                continue;
            }
            considered += 1;
            let relative_change = (after - before).abs() / scale;
            if relative_change > options.threshold {
                pairs.push(ShortcutPair {
                    i,
                    j,
                    before,
                    after,
                    relative_change,
                });
            }
        }
    }
    Ok(ShortcutReport {
        options,
        pairs_considered: considered,
        pairs,
    })
}
